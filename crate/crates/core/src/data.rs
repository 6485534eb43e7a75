//! Synthetic token-pattern corpus and SpecAugment-style masking.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{SpecAugConfig, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

const PROTOTYPE_STREAM: u64 = 0x9e37;

/// One utterance: `T × F` features and its token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Frames per token, in order.
    pub durations: Vec<usize>,
    pub lead_silence: usize,
    pub trail_silence: usize,
}

/// Prototype patterns for every token, grouped into families of similar
/// tokens (a shared base plus a small per-token offset).
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    prototypes: Vec<Vec<f64>>,
}

impl SyntheticTask {
    pub fn new(spec: &SyntheticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_for(&[spec.seed, PROTOTYPE_STREAM]);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(spec.tokens);
        for _ in 0..spec.tokens / spec.family_size {
            let base: Vec<f64> = (0..spec.feat_dim).map(|_| unit.sample(&mut rng)).collect();
            for _ in 0..spec.family_size {
                let mut placed = false;
                for _ in 0..1000 {
                    let p: Vec<f64> = base.iter().map(|b| b + spec.family_spread * unit.sample(&mut rng)).collect();
                    let clear = std::iter::once(&vec![0.0; spec.feat_dim])
                        .chain(&prototypes)
                        .all(|q| distance(&p, q) >= spec.min_proto_dist);
                    if clear {
                        prototypes.push(p);
                        placed = true;
                        break;
                    }
                }
                if !placed {
                    return Err(Error::Degenerate(format!(
                        "could not place prototype {} at distance {} from the others",
                        prototypes.len() + 1,
                        spec.min_proto_dist
                    )));
                }
            }
        }
        Ok(Self { spec: spec.clone(), prototypes })
    }

    pub fn prototype(&self, token: usize) -> &[f64] {
        &self.prototypes[token - 1]
    }

    pub fn family(&self, token: usize) -> usize {
        (token - 1) / self.spec.family_size
    }

    /// Unordered token pairs sharing a family.
    pub fn similar_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.spec.tokens;
        let mut out = Vec::new();
        for a in 1..=n {
            for b in a + 1..=n {
                if self.family(a) == self.family(b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    /// Utterance `index` of stream `stream`; independent of how many others
    /// are drawn.
    pub fn utterance(&self, stream: u64, index: u64) -> Utterance {
        let s = &self.spec;
        let mut rng = rng_for(&[s.seed, stream, index]);
        let noise = Normal::new(0.0, s.noise.max(f64::MIN_POSITIVE)).expect("positive sigma");
        let len = rng.gen_range(s.len_min..=s.len_max);
        let mut labels = Vec::with_capacity(len);
        while labels.len() < len {
            let t = rng.gen_range(1..=s.tokens);
            if labels.last() != Some(&t) {
                labels.push(t);
            }
        }
        let durations: Vec<usize> = labels.iter().map(|_| rng.gen_range(s.dur_min..=s.dur_max)).collect();
        let lead = rng.gen_range(0..=s.silence_max);
        let trail = rng.gen_range(0..=s.silence_max);
        let frames = lead + durations.iter().sum::<usize>() + trail;
        let mut data = Vec::with_capacity(frames * s.feat_dim);
        let silence = vec![0.0; s.feat_dim];
        let mut push = |proto: &[f64], count: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            for _ in 0..count {
                for &p in proto {
                    data.push(if s.noise > 0.0 { p + noise.sample(rng) } else { p });
                }
            }
        };
        push(&silence, lead, &mut rng);
        for (&t, &d) in labels.iter().zip(&durations) {
            push(self.prototype(t), d, &mut rng);
        }
        push(&silence, trail, &mut rng);
        Utterance {
            features: Tensor::new([frames, s.feat_dim], data).expect("non-empty utterance"),
            labels,
            durations,
            lead_silence: lead,
            trail_silence: trail,
        }
    }

    pub fn generate(&self, stream: u64, n: usize) -> Vec<Utterance> {
        (0..n as u64).map(|i| self.utterance(stream, i)).collect()
    }

    /// Index of the nearest prototype (0 for silence) to a frame.
    pub fn nearest_prototype(&self, frame: &[f64]) -> usize {
        let mut best = (distance(frame, &vec![0.0; frame.len()]), 0);
        for (i, p) in self.prototypes.iter().enumerate() {
            let d = distance(frame, p);
            if d < best.0 {
                best = (d, i + 1);
            }
        }
        best.1
    }
}

/// Distinct data streams for the three splits.
pub const TRAIN_STREAM: u64 = 1;
pub const VALID_STREAM: u64 = 2;
pub const TEST_STREAM: u64 = 3;

pub fn generate_synthetic(spec: &SyntheticTaskSpec, n: usize) -> Result<Vec<Utterance>> {
    Ok(SyntheticTask::new(spec)?.generate(TRAIN_STREAM, n))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Zeroes random time spans and frequency bands. Each span width is drawn
/// uniformly from `0..=max`, capped one below the axis length.
pub fn spec_mask(features: &Tensor, cfg: &SpecAugConfig, seed: u64) -> Tensor {
    let (t, f) = (features.rows(), features.cols());
    let mut out = features.clone();
    let mut rng = rng_for(&[seed, 0x5a5a]);
    let span = |len: usize, max: usize, rng: &mut rand_chacha::ChaCha8Rng| {
        let w = rng.gen_range(0..=max.min(len.saturating_sub(1)));
        let start = rng.gen_range(0..=len - w);
        start..start + w
    };
    for _ in 0..cfg.time_masks {
        let r = span(t, cfg.max_time, &mut rng);
        out.data_mut()[r.start * f..r.end * f].fill(0.0);
    }
    for _ in 0..cfg.freq_masks {
        let r = span(f, cfg.max_freq, &mut rng);
        for row in out.data_mut().chunks_mut(f) {
            row[r.clone()].fill(0.0);
        }
    }
    out
}
