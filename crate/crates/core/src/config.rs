//! Model, loss, data and optimizer configuration plus the line-based
//! `key = value` run-config format.

use std::fmt::Write as _;

use crate::ctc::BLANK;
use crate::error::{Error, Result};

macro_rules! keyed {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            fn set_key(&mut self, key: &str, value: &str) -> Option<std::result::Result<(), String>> {
                match key {
                    $(stringify!($field) => Some(
                        value.parse().map(|v| self.$field = v).map_err(|e| format!("{e}"))
                    ),)*
                    _ => None,
                }
            }

            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), self.$field.to_string()),)*]
            }
        }
    };
}

/// Architecture hyperparameters shared by the CASS-NAT model and the AT baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub feat_dim: usize,
    pub frontend_channels: usize,
    pub d_att: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub n_enc: usize,
    /// Encoder block after which the middle CTC head taps (1-based).
    pub enc_middle: usize,
    pub n_tae: usize,
    pub n_sad: usize,
    pub n_mad: usize,
    /// MAD block after which the middle CE head taps (1-based).
    pub mad_middle: usize,
    pub k_enc: usize,
    pub k_dec: usize,
    pub enc_kernel: usize,
    pub dec_kernel: usize,
    /// Output labels including the blank (id 0).
    pub vocab: usize,
    pub dropout: f64,
    pub trigger_context: usize,
    pub at_dec_blocks: usize,
}

keyed!(ModelConfig {
    feat_dim, frontend_channels, d_att, n_heads, d_ff, n_enc, enc_middle, n_tae, n_sad, n_mad,
    mad_middle, k_enc, k_dec, enc_kernel, dec_kernel, vocab, dropout, trigger_context, at_dec_blocks,
});

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            frontend_channels: 64,
            d_att: 32,
            n_heads: 4,
            d_ff: 128,
            n_enc: 4,
            enc_middle: 2,
            n_tae: 1,
            n_sad: 3,
            n_mad: 4,
            mad_middle: 2,
            k_enc: 20,
            k_dec: 8,
            enc_kernel: 15,
            dec_kernel: 7,
            vocab: 13,
            dropout: 0.1,
            trigger_context: 1,
            at_dec_blocks: 4,
        }
    }
}

impl ModelConfig {
    pub fn blank(&self) -> usize {
        BLANK
    }

    pub fn d_head(&self) -> usize {
        self.d_att / self.n_heads
    }

    /// Frequency extent after the two stride-2 convolutions.
    pub fn frontend_freq(&self) -> usize {
        self.feat_dim.div_ceil(2).div_ceil(2)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_heads == 0 || self.d_att % self.n_heads != 0 {
            return fail(format!("d_att {} not divisible by n_heads {}", self.d_att, self.n_heads));
        }
        if self.feat_dim < 4 {
            return fail(format!("feat_dim {} too small for two stride-2 reductions", self.feat_dim));
        }
        for (name, v) in [
            ("frontend_channels", self.frontend_channels),
            ("d_ff", self.d_ff),
            ("n_enc", self.n_enc),
            ("n_tae", self.n_tae),
            ("n_sad", self.n_sad),
            ("n_mad", self.n_mad),
            ("at_dec_blocks", self.at_dec_blocks),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        if self.enc_middle == 0 || self.enc_middle >= self.n_enc {
            return fail(format!("enc_middle {} must lie strictly inside 1..{}", self.enc_middle, self.n_enc));
        }
        if self.mad_middle == 0 || self.mad_middle >= self.n_mad {
            return fail(format!("mad_middle {} must lie strictly inside 1..{}", self.mad_middle, self.n_mad));
        }
        if self.enc_kernel % 2 == 0 || self.dec_kernel % 2 == 0 {
            return fail(format!("depthwise kernels must be odd, got {} and {}", self.enc_kernel, self.dec_kernel));
        }
        if self.vocab < 2 {
            return fail(format!("vocab {} must include blank plus at least one token", self.vocab));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        render("model", &self.entries())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in lines(text)? {
            let key = key.strip_prefix("model.").unwrap_or(key);
            apply(cfg.set_key(key, value), line, key)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Loss weights. The decoder and CTC task ratios weight final against
/// middle-layer losses; `global_ctc_weight` balances CTC against CE.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_ce: f64,
    pub lambda_ctc: f64,
    pub global_ctc_weight: f64,
    pub label_smoothing: f64,
}

keyed!(LossConfig { lambda_ce, lambda_ctc, global_ctc_weight, label_smoothing });

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_ce: 0.9, lambda_ctc: 0.5, global_ctc_weight: 0.5, label_smoothing: 0.1 }
    }
}

impl LossConfig {
    pub fn final_only(&self) -> Self {
        Self { lambda_ce: 1.0, lambda_ctc: 1.0, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_ctc", self.lambda_ctc),
            ("global_ctc_weight", self.global_ctc_weight),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Synthetic token-pattern task standing in for a speech corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTaskSpec {
    /// Non-blank tokens; ids run 1..=tokens.
    pub tokens: usize,
    pub feat_dim: usize,
    /// Tokens per prototype family; family members share a base pattern.
    pub family_size: usize,
    /// Scale of the per-token offset from its family base.
    pub family_spread: f64,
    pub min_proto_dist: f64,
    pub dur_min: usize,
    pub dur_max: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Maximum leading/trailing silence frames.
    pub silence_max: usize,
    pub noise: f64,
    pub seed: u64,
}

keyed!(SyntheticTaskSpec {
    tokens, feat_dim, family_size, family_spread, min_proto_dist, dur_min, dur_max, len_min,
    len_max, silence_max, noise, seed,
});

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            tokens: 12,
            feat_dim: 16,
            family_size: 2,
            family_spread: 0.5,
            min_proto_dist: 1.0,
            dur_min: 8,
            dur_max: 14,
            len_min: 2,
            len_max: 6,
            silence_max: 3,
            noise: 0.2,
            seed: 7,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.tokens < 2 {
            return fail("synthetic task needs at least 2 tokens".into());
        }
        if self.family_size == 0 || self.tokens % self.family_size != 0 {
            return fail(format!("family_size {} must divide tokens {}", self.family_size, self.tokens));
        }
        if self.dur_min == 0 || self.dur_min > self.dur_max || self.len_min == 0 || self.len_min > self.len_max {
            return fail("duration and length ranges must be non-empty and positive".into());
        }
        if self.noise < 0.0 || self.min_proto_dist < 0.0 || self.family_spread < 0.0 {
            return fail("noise, spread and distances must be non-negative".into());
        }
        Ok(())
    }
}

/// SpecAugment-style masking (no time warp).
#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugConfig {
    pub time_masks: usize,
    pub max_time: usize,
    pub freq_masks: usize,
    pub max_freq: usize,
}

keyed!(SpecAugConfig { time_masks, max_time, freq_masks, max_freq });

impl Default for SpecAugConfig {
    fn default() -> Self {
        Self { time_masks: 1, max_time: 4, freq_masks: 1, max_freq: 2 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Checkpoints averaged at the end.
    pub keep_best: usize,
    /// Stop once validation sequence accuracy reaches 1 for this many epochs (0 disables).
    pub early_stop_perfect: usize,
}

keyed!(OptimConfig { peak_lr, warmup, beta1, beta2, eps, grad_clip, batch_size, epochs, keep_best, early_stop_perfect });

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 2e-3,
            warmup: 400,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            grad_clip: 5.0,
            batch_size: 8,
            epochs: 12,
            keep_best: 3,
            early_stop_perfect: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.peak_lr < 0.0 || self.batch_size == 0 || self.keep_best == 0 || self.grad_clip <= 0.0 {
            return Err(Error::Config("optimizer needs lr >= 0, batch >= 1, keep_best >= 1, clip > 0".into()));
        }
        Ok(())
    }
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub data: SyntheticTaskSpec,
    pub specaug: SpecAugConfig,
    pub optim: OptimConfig,
    pub seed: u64,
    pub train_utterances: usize,
    pub valid_utterances: usize,
    pub test_utterances: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            data: SyntheticTaskSpec::default(),
            specaug: SpecAugConfig::default(),
            optim: OptimConfig::default(),
            seed: 1,
            train_utterances: 2000,
            valid_utterances: 200,
            test_utterances: 200,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, key, value) in lines(text)? {
            let (section, field) = key.split_once('.').unwrap_or(("", key));
            let hit = match section {
                "model" => cfg.model.set_key(field, value),
                "loss" => cfg.loss.set_key(field, value),
                "data" => cfg.data.set_key(field, value),
                "specaug" => cfg.specaug.set_key(field, value),
                "optim" => cfg.optim.set_key(field, value),
                "" => match field {
                    "seed" => Some(value.parse().map(|v| cfg.seed = v).map_err(|e| format!("{e}"))),
                    "train_utterances" => Some(value.parse().map(|v| cfg.train_utterances = v).map_err(|e| format!("{e}"))),
                    "valid_utterances" => Some(value.parse().map(|v| cfg.valid_utterances = v).map_err(|e| format!("{e}"))),
                    "test_utterances" => Some(value.parse().map(|v| cfg.test_utterances = v).map_err(|e| format!("{e}"))),
                    _ => None,
                },
                _ => None,
            };
            apply(hit, line, key)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.validate()?;
        self.optim.validate()?;
        if self.model.feat_dim != self.data.feat_dim {
            return Err(Error::Config(format!(
                "model.feat_dim {} differs from data.feat_dim {}",
                self.model.feat_dim, self.data.feat_dim
            )));
        }
        if self.model.vocab != self.data.tokens + 1 {
            return Err(Error::Config(format!(
                "model.vocab {} must equal data.tokens {} plus blank",
                self.model.vocab, self.data.tokens
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("train_utterances", self.train_utterances.to_string()),
            ("valid_utterances", self.valid_utterances.to_string()),
            ("test_utterances", self.test_utterances.to_string()),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }
        out += &render("model", &self.model.entries());
        out += &render("loss", &self.loss.entries());
        out += &render("data", &self.data.entries());
        out += &render("specaug", &self.specaug.entries());
        out += &render("optim", &self.optim.entries());
        out
    }
}

fn render(section: &str, entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{section}.{k} = {v}\n")).collect()
}

fn lines(text: &str) -> Result<Vec<(usize, &str, &str)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigLine {
            line: i + 1,
            detail: format!("expected `key = value`, got `{line}`"),
        })?;
        out.push((i + 1, k.trim(), v.trim()));
    }
    Ok(out)
}

fn apply(hit: Option<std::result::Result<(), String>>, line: usize, key: &str) -> Result<()> {
    match hit {
        None => Err(Error::ConfigLine { line, detail: format!("unknown key `{key}`") }),
        Some(Err(e)) => Err(Error::ConfigLine { line, detail: format!("bad value for `{key}`: {e}") }),
        Some(Ok(())) => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_text() {
        let mut cfg = RunConfig::default();
        cfg.model.d_att = 16;
        cfg.loss.lambda_ce = 0.75;
        cfg.optim.peak_lr = 1.5e-3;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(ModelConfig::from_text(&cfg.model.to_text()).unwrap(), cfg.model);
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("seed = 3\n\nmodel.bogus = 1\n").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 3, .. }), "{err}");
    }

    #[test]
    fn bad_value_reports_line() {
        let err = RunConfig::parse("# comment\nmodel.d_att = wide\n").unwrap_err();
        assert!(matches!(err, Error::ConfigLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn invariants_enforced() {
        assert!(RunConfig::parse("model.n_heads = 5").is_err());
        assert!(RunConfig::parse("model.enc_middle = 4").is_err());
        assert!(RunConfig::parse("model.dec_kernel = 6").is_err());
        assert!(RunConfig::parse("loss.lambda_ce = 1.5").is_err());
        assert!(RunConfig::parse("model.vocab = 9").is_err());
    }

    #[test]
    fn loss_defaults() {
        let l = LossConfig::default();
        assert_eq!((l.lambda_ce, l.lambda_ctc, l.label_smoothing), (0.9, 0.5, 0.1));
    }
}
