//! Decode latency comparison between the single-pass decoder and the
//! autoregressive baseline at fixed output lengths.

use std::fmt::Write as _;
use std::time::Instant;

use crate::config::SyntheticTaskSpec;
use crate::ctc::{alignment_to_segments, best_path_decode, collapse, ctc_forced_align, LogPosteriorGrid};
use crate::data::{SyntheticTask, TEST_STREAM};
use crate::error::{Error, Result};
use crate::model::{AtBaseline, CassNat};
use crate::nn::{ForwardCtx, Mode, ParamStore};
use crate::tensor::Tensor;

/// Wall-clock milliseconds of one decode, split at the encoder output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Timing {
    pub total_ms: f64,
    pub decoder_ms: f64,
    pub passes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BenchRow {
    pub length: usize,
    pub frames: usize,
    pub nat: Timing,
    pub at: Timing,
}

impl BenchRow {
    pub fn speedup_total(&self) -> f64 {
        self.at.total_ms / self.nat.total_ms
    }

    /// Ratio of the stages after the shared encoder.
    pub fn speedup_decoder(&self) -> f64 {
        self.at.decoder_ms / self.nat.decoder_ms
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Encoder, CTC segmentation and one decoder pass. The best path is used
/// when it has the requested length; otherwise the reference is force-aligned
/// so both systems emit the same number of tokens.
pub fn time_nat(model: &CassNat, store: &ParamStore, x: &Tensor, reference: &[usize]) -> Result<Timing> {
    let start = Instant::now();
    let mut ctx = ForwardCtx::new(store, Mode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let enc = model.encode(&mut ctx, xv, false)?;
    let lp = ctx.tape.value(enc.ctc_final);
    let grid = LogPosteriorGrid::from_log_probs(lp.rows(), lp.cols(), lp.data().to_vec())?;
    let split = Instant::now();
    let mut path = best_path_decode(&grid);
    if collapse(&path.labels).len() != reference.len() {
        path = ctc_forced_align(&grid, reference)?;
    }
    let out = model.decode_segments(&mut ctx, enc.h, &alignment_to_segments(&path)?)?;
    Ok(Timing { total_ms: ms(start), decoder_ms: ms(split), passes: out.decoder_passes })
}

/// Encoder and greedy autoregressive decoding of exactly `length` tokens.
pub fn time_at(model: &AtBaseline, store: &ParamStore, x: &Tensor, length: usize) -> Result<Timing> {
    let start = Instant::now();
    let mut ctx = ForwardCtx::new(store, Mode::Eval);
    let xv = ctx.tape.constant(x.clone());
    let enc = model.encoder.forward(&mut ctx, xv, false)?;
    ctx.tape.value(enc.ctc_final);
    let split = Instant::now();
    let out = model.decode_from(&mut ctx, enc.h, Some(length))?;
    Ok(Timing { total_ms: ms(start), decoder_ms: ms(split), passes: out.decoder_passes })
}

/// For each length, synthesizes one utterance with that many tokens and
/// reports median timings over `repeats` decodes of each system.
pub fn run_bench(
    nat: (&CassNat, &ParamStore),
    at: (&AtBaseline, &ParamStore),
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let cfg = &nat.0.cfg;
    if cfg.feat_dim != at.0.cfg.feat_dim || cfg.vocab != at.0.cfg.vocab {
        return Err(Error::Config("benchmarked models disagree on feature width or vocabulary".into()));
    }
    if repeats == 0 || lengths.is_empty() {
        return Err(Error::Usage("bench needs at least one length and one repeat".into()));
    }
    let mut rows = Vec::new();
    for &length in lengths {
        let spec = SyntheticTaskSpec {
            tokens: cfg.vocab - 1,
            feat_dim: cfg.feat_dim,
            family_size: 1,
            len_min: length,
            len_max: length,
            seed,
            ..SyntheticTaskSpec::default()
        };
        let utt = SyntheticTask::new(&spec)?.utterance(TEST_STREAM, length as u64);
        let mut n = Vec::new();
        let mut a = Vec::new();
        for _ in 0..repeats {
            n.push(time_nat(nat.0, nat.1, &utt.features, &utt.labels)?);
            a.push(time_at(at.0, at.1, &utt.features, length)?);
        }
        let summarize = |v: &[Timing]| Timing {
            total_ms: median(v.iter().map(|t| t.total_ms).collect()),
            decoder_ms: median(v.iter().map(|t| t.decoder_ms).collect()),
            passes: v[0].passes,
        };
        rows.push(BenchRow { length, frames: utt.features.rows(), nat: summarize(&n), at: summarize(&a) });
    }
    Ok(rows)
}

pub fn format_bench(rows: &[BenchRow]) -> String {
    let mut s = String::from(
        "length\tframes\tnat_ms\tat_ms\tnat_decoder_ms\tat_decoder_ms\tnat_passes\tat_passes\tspeedup\tdecoder_speedup\n",
    );
    for r in rows {
        writeln!(
            s,
            "{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}\t{}\t{:.2}\t{:.2}",
            r.length,
            r.frames,
            r.nat.total_ms,
            r.at.total_ms,
            r.nat.decoder_ms,
            r.at.decoder_ms,
            r.nat.passes,
            r.at.passes,
            r.speedup_total(),
            r.speedup_decoder()
        )
        .unwrap();
    }
    s
}

/// Whether a per-row ratio strictly increases with output length.
pub fn increasing(rows: &[BenchRow], ratio: impl Fn(&BenchRow) -> f64) -> bool {
    rows.windows(2).all(|w| ratio(&w[1]) > ratio(&w[0]))
}
