//! Central finite-difference gradient checking.

use rand::seq::index::sample;

use crate::config::{LossConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Mode, ParamStore};
use crate::rng::rng_for;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so that gradients near zero are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
    pub tol: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct Probe {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the reverse-mode gradient of scalar `f` at `x` against central
/// differences. At most `max_probes` elements are probed (chosen by `seed`).
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64, max_probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || tol <= 0.0 {
        return Err(Error::Parameter(format!("grad_check needs step > 0 and tol > 0, got {step}, {tol}")));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape.grad(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]);

    let indices: Vec<usize> = if x.numel() <= max_probes {
        (0..x.numel()).collect()
    } else {
        let mut v = sample(&mut rng_for(&[seed]), x.numel(), max_probes).into_vec();
        v.sort_unstable();
        v
    };

    let eval = |probe: &Tensor, index: usize| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe.clone(), false);
        let out = f(&mut t, v).map_err(|e| match e {
            Error::NonFinite { op, .. } => Error::NonFinite { op: format!("{op} (grad_check probe)"), index },
            other => other,
        })?;
        let val = t.value(out).item();
        if !val.is_finite() {
            return Err(Error::NonFinite { op: "grad_check probe".into(), index });
        }
        Ok(val)
    };

    let mut probes = Vec::with_capacity(indices.len());
    let mut probe = x.clone();
    for &i in &indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe, i)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe, i)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        probes.push(Probe { index: i, analytic: a, numeric, rel_error: relative_error(a, numeric) });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { probes, max_rel_error, tol })
}

/// Gradient check of `f` with respect to every tensor in `store`, probing
/// at most `max_probes` elements per tensor. Returns one report per tensor,
/// keyed by parameter name.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    tol: f64,
    max_probes: usize,
    seed: u64,
) -> Result<Vec<(String, GradCheckReport)>>
where
    F: Fn(&mut ForwardCtx<'_>) -> Result<Var>,
{
    if step <= 0.0 || tol <= 0.0 {
        return Err(Error::Parameter(format!("grad_check needs step > 0 and tol > 0, got {step}, {tol}")));
    }
    let mut ctx = ForwardCtx::new(store, Mode::Eval).with_param_grads();
    let loss = f(&mut ctx)?;
    let grads = ctx.param_grads(loss)?;
    drop(ctx);

    let mut work = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.get(id).numel();
        let analytic = grads
            .iter()
            .find(|(g, _)| *g == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; n]);
        let indices: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng_for(&[seed, id.index() as u64]), n, max_probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut probes = Vec::with_capacity(indices.len());
        for &i in &indices {
            let orig = work.get(id).data()[i];
            let eval = |value: f64, work: &mut ParamStore| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = value;
                let mut c = ForwardCtx::new(work, Mode::Eval);
                let v = f(&mut c).map_err(|e| match e {
                    Error::NonFinite { op, .. } => Error::NonFinite { op: format!("{op} (grad_check probe)"), index: i },
                    other => other,
                })?;
                let val = c.tape.value(v).item();
                if !val.is_finite() {
                    return Err(Error::NonFinite { op: format!("grad_check probe of {}", store.name(id)), index: i });
                }
                Ok(val)
            };
            let plus = eval(orig + step, &mut work)?;
            let minus = eval(orig - step, &mut work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[i];
            probes.push(Probe { index: i, analytic: a, numeric, rel_error: relative_error(a, numeric) });
        }
        let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
        out.push((store.name(id).to_string(), GradCheckReport { probes, max_rel_error, tol }));
    }
    Ok(out)
}

/// Blocks covered by [`gradcheck_suite`], in run order.
pub const SUITE_BLOCKS: [&str; 10] = ["frontend", "ffn", "conv", "encoder", "tae", "sad", "mad", "ctc", "ce", "objective"];

/// Step, tolerance and probe budget for the block suite.
#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub step: f64,
    pub tol: f64,
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { step: 1e-5, tol: 1e-4, max_probes: 4, seed: 11 }
    }
}

#[derive(Clone, Debug)]
pub struct BlockCheck {
    pub block: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
    /// Parameter and probe with the largest relative error.
    pub worst: Option<(String, Probe)>,
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    use rand::Rng;
    let mut rng = rng_for(&[seed, 0xc0de]);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches")
}

// Weighted sum of a block output with fixed coefficients. With `fault` set a
// detached copy of the squared output is added: finite differences see it,
// the tape does not.
fn readout(ctx: &mut ForwardCtx<'_>, out: Var, seed: u64, fault: bool) -> Result<Var> {
    let shape = ctx.tape.shape(out).to_vec();
    let c = ctx.tape.constant(random_tensor(&shape, seed));
    let m = ctx.tape.mul(out, c)?;
    let loss = ctx.tape.sum(m)?;
    if !fault {
        return Ok(loss);
    }
    let v = ctx.tape.value(out);
    let sq = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * x).collect())?;
    let detached = ctx.tape.constant(sq);
    let extra = ctx.tape.sum(detached)?;
    ctx.tape.add(loss, extra)
}

/// Finite-difference checks of every block built at `cfg`'s widths (and of
/// the full training objective). `only` restricts the run to one block;
/// `fault` corrupts the named block's gradient to exercise the harness.
pub fn gradcheck_suite(
    cfg: &ModelConfig,
    only: Option<&str>,
    fault: Option<&str>,
    opts: &SuiteOptions,
) -> Result<Vec<BlockCheck>> {
    use crate::attention::{make_bimask, make_trigger_mask, MaskMatrix};
    use crate::blocks::{ConvModule, EncoderBlock, FeedForward, Frontend, MadBlock, SadBlock, TokenAcousticExtractor};
    use crate::ctc::{ctc_loss_on_tape, Segment, TokenSegmentation};
    use crate::loss::smoothed_ce;
    use crate::model::CassNat;
    use crate::nn::{Init, ParamBuilder};

    cfg.validate()?;
    for name in only.into_iter().chain(fault) {
        if !SUITE_BLOCKS.contains(&name) {
            return Err(Error::Usage(format!("unknown block {name}; expected one of {}", SUITE_BLOCKS.join(", "))));
        }
    }
    let (d, h, ff) = (cfg.d_att, cfg.n_heads, cfg.d_ff);
    let (frames, tokens) = (6, 3);
    let mut out = Vec::new();
    for (i, &block) in SUITE_BLOCKS.iter().enumerate() {
        if only.is_some_and(|o| o != block) {
            continue;
        }
        let broken = fault == Some(block);
        let seed = opts.seed + i as u64;
        let mut b = ParamBuilder::new(seed);
        let input = |b: &mut ParamBuilder, shape: &[usize]| b.tensor("input", shape, Init::Uniform(1.0));
        let check = |store: &ParamStore, f: &dyn Fn(&mut ForwardCtx<'_>) -> Result<Var>| {
            grad_check_params(store, |ctx| f(ctx), opts.step, opts.tol, opts.max_probes, seed)
        };
        let reports = match block {
            "frontend" => {
                let fe = Frontend::build(&mut b, "frontend", cfg.feat_dim, cfg.frontend_channels, d)?;
                let x = input(&mut b, &[4 * frames / 2, cfg.feat_dim])?;
                let store = b.finish();
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let y = fe.forward(ctx, xv)?;
                    readout(ctx, y, seed, broken)
                })?
            }
            "ffn" => {
                let ffn = FeedForward::build(&mut b, "ffn", d, ff)?;
                let x = input(&mut b, &[frames, d])?;
                let store = b.finish();
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let y = ffn.half_step(ctx, xv)?;
                    readout(ctx, y, seed, broken)
                })?
            }
            "conv" => {
                let conv = ConvModule::build(&mut b, "conv", d, cfg.enc_kernel)?;
                let x = input(&mut b, &[frames, d])?;
                let store = b.finish();
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let y = conv.forward(ctx, xv)?;
                    readout(ctx, y, seed, broken)
                })?
            }
            "encoder" => {
                let blk = EncoderBlock::build(&mut b, "encoder", d, h, ff, cfg.k_enc, cfg.enc_kernel)?;
                let x = input(&mut b, &[frames, d])?;
                let store = b.finish();
                let mask = make_bimask(frames, frames)?;
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let y = blk.forward(ctx, xv, &mask)?;
                    readout(ctx, y, seed, broken)
                })?
            }
            "tae" => {
                let tae = TokenAcousticExtractor::build(&mut b, "tae", d, h, ff)?;
                let x = input(&mut b, &[frames, d])?;
                let store = b.finish();
                let seg = TokenSegmentation::new(vec![
                    Segment { token: 1, start: 1, end: 2 },
                    Segment { token: 2, start: 2, end: 4 },
                    Segment { token: 1, start: 5, end: 6 },
                ])?;
                let mask = make_trigger_mask(&seg, frames)?;
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let y = tae.forward(ctx, xv, &mask)?;
                    readout(ctx, y, seed, broken)
                })?
            }
            "sad" => {
                let sad = SadBlock::build(&mut b, "sad", d, h, ff, cfg.k_dec)?;
                let x = input(&mut b, &[tokens, d])?;
                let store = b.finish();
                let mask = make_bimask(tokens, tokens)?;
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let y = sad.forward(ctx, xv, &mask)?;
                    readout(ctx, y, seed, broken)
                })?
            }
            "mad" => {
                let mad = MadBlock::build(&mut b, "mad", d, h, ff, cfg.k_dec, cfg.dec_kernel)?;
                let s = input(&mut b, &[tokens, d])?;
                let hv = b.tensor("frames", &[frames, d], Init::Uniform(1.0))?;
                let store = b.finish();
                let self_mask = make_bimask(tokens, tokens)?;
                let cross = MaskMatrix::from_fn(tokens, frames, |_, _| true)?;
                check(&store, &|ctx| {
                    let (sv, fv) = (ctx.p(s), ctx.p(hv));
                    let y = mad.forward(ctx, sv, fv, &self_mask, &cross)?;
                    readout(ctx, y, seed, broken)
                })?
            }
            "ctc" => {
                let x = input(&mut b, &[frames, cfg.vocab])?;
                let store = b.finish();
                let labels: Vec<usize> = (0..2).map(|k| 1 + k % (cfg.vocab - 1)).collect();
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let lp = ctx.tape.log_softmax(xv)?;
                    let l = ctc_loss_on_tape(&mut ctx.tape, lp, &labels)?;
                    readout(ctx, l, seed, broken)
                })?
            }
            "ce" => {
                let classes = cfg.vocab - 1;
                let x = input(&mut b, &[tokens, classes])?;
                let store = b.finish();
                let labels: Vec<usize> = (0..tokens).map(|k| (2 * k + 1) % classes).collect();
                check(&store, &|ctx| {
                    let xv = ctx.p(x);
                    let lp = ctx.tape.log_softmax(xv)?;
                    let l = smoothed_ce(&mut ctx.tape, lp, &labels, 0.1)?;
                    readout(ctx, l, seed, broken)
                })?
            }
            _ => {
                let (model, store) = CassNat::build(cfg, seed)?;
                let x = random_tensor(&[16, cfg.feat_dim], seed);
                let labels: Vec<usize> = (0..2).map(|k| 1 + k % (cfg.vocab - 1)).collect();
                let loss = LossConfig::default();
                check(&store, &|ctx| {
                    let (l, _) = model.training_loss(ctx, &x, &labels, &loss)?;
                    readout(ctx, l, seed, broken)
                })?
            }
        };
        let worst = reports
            .iter()
            .filter_map(|(n, r)| r.worst().map(|p| (n.clone(), *p)))
            .max_by(|a, b| a.1.rel_error.total_cmp(&b.1.rel_error));
        let max_rel_error = worst.as_ref().map_or(0.0, |w| w.1.rel_error);
        out.push(BlockCheck { block, max_rel_error, passed: max_rel_error <= opts.tol, worst });
    }
    Ok(out)
}
