//! Optimizer, learning-rate schedule, evaluation metrics and the training
//! loop with best-checkpoint averaging.

use std::fmt;

use log::{info, warn};
use rand::seq::SliceRandom;

use crate::config::{OptimConfig, RunConfig};
use crate::data::{spec_mask, SyntheticTask, Utterance, TRAIN_STREAM, VALID_STREAM};
use crate::error::{Error, Result};
use crate::loss::LossBreakdown;
use crate::model::{Model, ModelKind};
use crate::nn::{ForwardCtx, Mode, ParamStore};
use crate::rng::{derive_seed, rng_for};

/// `peak · min(step / warmup, sqrt(warmup / step))`, steps counted from 1.
pub fn learning_rate(step: u64, cfg: &OptimConfig) -> f64 {
    let s = step.max(1) as f64;
    if cfg.warmup == 0 {
        return cfg.peak_lr;
    }
    let w = cfg.warmup as f64;
    cfg.peak_lr * (s / w).min((w / s).sqrt())
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>], lr: f64, cfg: &OptimConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).data_mut();
            let (m, v, g) = (&mut self.m[k], &mut self.v[k], &grads[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
            }
        }
    }
}

pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Token accuracy is `1 − edits / reference tokens`; sequence error is the
/// fraction of utterances not decoded exactly.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Accuracy {
    pub utterances: usize,
    pub ref_tokens: usize,
    pub edits: usize,
    pub wrong_sequences: usize,
}

impl Accuracy {
    pub fn add(&mut self, reference: &[usize], hypothesis: &[usize]) {
        let e = edit_distance(reference, hypothesis);
        self.utterances += 1;
        self.ref_tokens += reference.len();
        self.edits += e;
        self.wrong_sequences += usize::from(e > 0);
    }

    pub fn token_accuracy(&self) -> f64 {
        1.0 - self.edits as f64 / self.ref_tokens.max(1) as f64
    }

    pub fn sequence_error(&self) -> f64 {
        self.wrong_sequences as f64 / self.utterances.max(1) as f64
    }

    fn better_than(&self, o: &Self) -> bool {
        (self.token_accuracy(), -self.sequence_error()) >= (o.token_accuracy(), -o.sequence_error())
    }
}

impl fmt::Display for Accuracy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "token_acc={:.4} seq_err={:.4} ({} utterances)",
            self.token_accuracy(),
            self.sequence_error(),
            self.utterances
        )
    }
}

pub fn evaluate(model: &Model, store: &ParamStore, data: &[Utterance]) -> Result<Accuracy> {
    let mut acc = Accuracy::default();
    for u in data {
        let d = model.decode(store, &u.features)?;
        acc.add(&u.labels, &d.tokens);
    }
    Ok(acc)
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub step: u64,
    pub loss: LossBreakdown,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = &self.loss;
        write!(f, "{}\t{}\t{}\t{}\t{}\t{}", self.step, l.total, l.ctc_final, l.ctc_mid, l.ce_final, l.ce_mid)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Accuracy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub epoch: usize,
    pub valid: Accuracy,
    pub store: ParamStore,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub store: ParamStore,
    pub adam: Adam,
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    pub best: Vec<Candidate>,
    pub log: Vec<LogLine>,
    pub epochs: Vec<EpochReport>,
    pub perfect_streak: usize,
}

impl TrainState {
    pub fn new(store: ParamStore) -> Self {
        Self {
            adam: Adam::new(&store),
            store,
            step: 0,
            epoch: 0,
            best: Vec::new(),
            log: Vec::new(),
            epochs: Vec::new(),
            perfect_streak: 0,
        }
    }

    /// Element-wise mean of the retained best checkpoints (the current
    /// parameters when none have been validated yet).
    pub fn averaged(&self) -> Result<ParamStore> {
        if self.best.is_empty() {
            return Ok(self.store.clone());
        }
        ParamStore::average(&self.best.iter().map(|c| &c.store).collect::<Vec<_>>())
    }

    fn offer(&mut self, epoch: usize, valid: Accuracy, keep: usize) {
        self.best.push(Candidate { epoch, valid, store: self.store.clone() });
        // later epochs win ties
        self.best.sort_by(|a, b| {
            let ka = (a.valid.token_accuracy(), -a.valid.sequence_error(), a.epoch);
            let kb = (b.valid.token_accuracy(), -b.valid.sequence_error(), b.epoch);
            kb.partial_cmp(&ka).expect("finite accuracies")
        });
        self.best.truncate(keep);
    }
}

pub struct TrainOutcome {
    pub state: TrainState,
    /// Set when a non-finite loss or gradient stopped training; `state`
    /// then holds the last good parameters.
    pub diverged: Option<u64>,
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(&[seed, 0x5bd1, epoch as u64]));
    order
}

/// Runs epochs until `cfg.optim.epochs` are complete (or early stopping
/// fires). `on_epoch` sees the state after every validated epoch.
pub fn train(
    model: &Model,
    mut state: TrainState,
    train_set: &[Utterance],
    valid_set: &[Utterance],
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let opt = &cfg.optim;
    let dropout = model.config().dropout;
    while state.epoch < opt.epochs {
        if opt.early_stop_perfect > 0 && state.perfect_streak >= opt.early_stop_perfect {
            info!("validation perfect for {} epochs, stopping", state.perfect_streak);
            break;
        }
        let order = shuffled(train_set.len(), cfg.seed, state.epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(opt.batch_size) {
            let step = state.step + 1;
            let mut grads: Vec<Vec<f64>> = state.store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
            let mut sum = LossBreakdown::default();
            let mut bad = false;
            for (i, &u) in batch.iter().enumerate() {
                let utt = &train_set[u];
                let seed = derive_seed(&[cfg.seed, step, i as u64]);
                let x = spec_mask(&utt.features, &cfg.specaug, seed);
                let mut ctx = ForwardCtx::new(&state.store, Mode::Train { dropout, seed });
                let (loss, br) = match model.training_loss(&mut ctx, &x, &utt.labels, &cfg.loss) {
                    Ok(v) => v,
                    Err(Error::NonFinite { .. }) => {
                        bad = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                if !br.total.is_finite() {
                    bad = true;
                    break;
                }
                for (id, g) in ctx.param_grads(loss)? {
                    grads[id.index()].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                sum.add(&br);
            }
            let scale = 1.0 / batch.len() as f64;
            let mut norm2 = 0.0;
            for g in &mut grads {
                for v in g.iter_mut() {
                    *v *= scale;
                    norm2 += *v * *v;
                }
            }
            if bad || !norm2.is_finite() {
                warn!("non-finite loss or gradient at step {step}; keeping last good parameters");
                return Ok(TrainOutcome { state, diverged: Some(step) });
            }
            let norm = norm2.sqrt();
            if norm > opt.grad_clip {
                let c = opt.grad_clip / norm;
                grads.iter_mut().flatten().for_each(|v| *v *= c);
            }
            state.adam.step(&mut state.store, &grads, learning_rate(step, opt), opt);
            state.step = step;
            let mean = sum.scaled(scale);
            epoch_loss += mean.total * batch.len() as f64;
            state.log.push(LogLine { step, loss: mean });
        }
        state.epoch += 1;
        let valid = evaluate(model, &state.store, valid_set)?;
        let train_loss = epoch_loss / train_set.len() as f64;
        info!("epoch {} step {} loss {:.4} valid {}", state.epoch, state.step, train_loss, valid);
        let perfect = valid.edits == 0 && valid.utterances > 0;
        state.perfect_streak = if perfect { state.perfect_streak + 1 } else { 0 };
        state.offer(state.epoch, valid, opt.keep_best);
        state.epochs.push(EpochReport { epoch: state.epoch, train_loss, valid });
        on_epoch(&state)?;
    }
    Ok(TrainOutcome { state, diverged: None })
}

/// Builds the model, draws the training and validation splits from the
/// synthetic task and trains. `init` supplies starting parameters (for
/// example a store with a transferred encoder).
pub fn train_synthetic(
    cfg: &RunConfig,
    kind: ModelKind,
    init: Option<ParamStore>,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<(Model, TrainOutcome)> {
    cfg.validate()?;
    let (model, fresh) = Model::build(kind, &cfg.model, cfg.seed)?;
    let task = SyntheticTask::new(&cfg.data)?;
    let train_set = task.generate(TRAIN_STREAM, cfg.train_utterances);
    let valid_set = task.generate(VALID_STREAM, cfg.valid_utterances);
    let out = train(&model, TrainState::new(init.unwrap_or(fresh)), &train_set, &valid_set, cfg, on_epoch)?;
    Ok((model, out))
}

/// Best-first validation candidates never rank a worse one above a better one.
pub fn is_ranked(best: &[Candidate]) -> bool {
    best.windows(2).all(|w| w[0].valid.better_than(&w[1].valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, SyntheticTaskSpec};

    fn tiny_run() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            feat_dim: 8,
            frontend_channels: 4,
            d_att: 8,
            n_heads: 2,
            d_ff: 16,
            n_enc: 2,
            enc_middle: 1,
            n_sad: 1,
            n_mad: 2,
            mad_middle: 1,
            k_enc: 4,
            k_dec: 2,
            enc_kernel: 5,
            dec_kernel: 3,
            vocab: 5,
            at_dec_blocks: 1,
            ..ModelConfig::default()
        };
        cfg.data = SyntheticTaskSpec { tokens: 4, feat_dim: 8, len_max: 3, ..SyntheticTaskSpec::default() };
        cfg.optim.batch_size = 4;
        cfg.optim.epochs = 2;
        cfg.optim.warmup = 10;
        cfg.optim.peak_lr = 3e-3;
        cfg
    }

    fn data(cfg: &RunConfig, n: usize) -> (Vec<Utterance>, Vec<Utterance>) {
        let task = SyntheticTask::new(&cfg.data).unwrap();
        (task.generate(TRAIN_STREAM, n), task.generate(VALID_STREAM, 6))
    }

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig { peak_lr: 1.0, warmup: 100, ..OptimConfig::default() };
        assert!((learning_rate(50, &cfg) - 0.5).abs() < 1e-15);
        assert!((learning_rate(100, &cfg) - 1.0).abs() < 1e-15);
        assert!((learning_rate(400, &cfg) - 0.5).abs() < 1e-15);
        assert!(learning_rate(1, &cfg) < learning_rate(2, &cfg));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("p", crate::Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store);
        let cfg = OptimConfig::default();
        adam.step(&mut store, &[vec![0.5, -2.0, 0.0]], 0.1, &cfg);
        let p = store.by_name("p").unwrap().data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] - 2.1).abs() < 1e-6 && p[2] == 3.0);
    }

    #[test]
    fn edit_distance_cases() {
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(edit_distance(&[], &[4, 4]), 2);
        assert_eq!(edit_distance(&[1, 2], &[2, 1]), 2);
    }

    #[test]
    fn log_line_format() {
        let l = LogLine { step: 3, loss: LossBreakdown { total: 1.5, ctc_final: 2.0, ctc_mid: 2.5, ce_final: 1.0, ce_mid: 0.25 } };
        assert_eq!(l.to_string(), "3\t1.5\t2\t2.5\t1\t0.25");
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut cfg = tiny_run();
        cfg.optim.peak_lr = 0.0;
        cfg.optim.epochs = 1;
        let (model, store) = Model::build(ModelKind::CassNat, &cfg.model, 1).unwrap();
        let (tr, va) = data(&cfg, 8);
        let out = train(&model, TrainState::new(store.clone()), &tr, &va, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(out.state.store, store);
        assert_eq!(out.state.log.len(), 2);
    }

    #[test]
    fn loss_falls_over_first_steps() {
        let mut cfg = tiny_run();
        cfg.optim.batch_size = 16;
        cfg.optim.epochs = 10;
        cfg.optim.warmup = 1;
        cfg.optim.peak_lr = 1e-3;
        cfg.model.dropout = 0.0;
        cfg.specaug.time_masks = 0;
        cfg.specaug.freq_masks = 0;
        let (model, store) = Model::build(ModelKind::CassNat, &cfg.model, 2).unwrap();
        let (tr, va) = data(&cfg, 16);
        // one full batch per epoch, so every step sees the same data
        let out = train(&model, TrainState::new(store), &tr, &va, &cfg, &mut |_| Ok(())).unwrap();
        let losses: Vec<f64> = out.state.log.iter().map(|l| l.loss.total).collect();
        assert_eq!(losses.len(), 10);
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn resumed_run_matches_uninterrupted() {
        let cfg = tiny_run();
        let (model, store) = Model::build(ModelKind::CassNat, &cfg.model, 3).unwrap();
        let (tr, va) = data(&cfg, 8);
        let full = train(&model, TrainState::new(store.clone()), &tr, &va, &cfg, &mut |_| Ok(())).unwrap();
        let mut first = cfg.clone();
        first.optim.epochs = 1;
        let half = train(&model, TrainState::new(store), &tr, &va, &first, &mut |_| Ok(())).unwrap();
        let resumed = train(&model, half.state, &tr, &va, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(resumed.state, full.state);
        assert!(is_ranked(&full.state.best));
    }

    #[test]
    fn divergence_returns_last_good_parameters() {
        let cfg = tiny_run();
        let (model, mut store) = Model::build(ModelKind::CassNat, &cfg.model, 4).unwrap();
        let id = store.id("ctc.final.w").unwrap();
        store.get_mut(id).data_mut()[0] = f64::NAN;
        let (tr, va) = data(&cfg, 4);
        let out = train(&model, TrainState::new(store.clone()), &tr, &va, &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(out.diverged, Some(1));
        assert_eq!(out.state.step, 0);
    }

    #[test]
    fn keeps_best_and_averages() {
        let mut state = TrainState::new(ParamStore::new());
        let acc = |edits| Accuracy { utterances: 2, ref_tokens: 10, edits, wrong_sequences: edits.min(2) };
        for (epoch, e) in [(1, 5), (2, 1), (3, 3), (4, 1), (5, 9)] {
            state.offer(epoch, acc(e), 3);
        }
        let epochs: Vec<_> = state.best.iter().map(|c| c.epoch).collect();
        assert_eq!(epochs, [4, 2, 3]);
    }
}
