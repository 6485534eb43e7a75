//! Full models: the shared conformer encoder with CTC heads, the
//! alignment-driven non-autoregressive decoder and the autoregressive
//! baseline.

use crate::attention::{make_bimask, make_causal_mask, make_trigger_mask, MaskMatrix, MultiHeadAttention};
use crate::blocks::{sinusoidal_positions, EncoderBlock, FeedForward, Frontend, MadBlock, SadBlock, TokenAcousticExtractor};
use crate::config::{LossConfig, ModelConfig};
use crate::ctc::{
    alignment_to_segments, beam_align_nbest, best_path_decode, collapse, ctc_forced_align, ctc_loss_on_tape,
    expand_segments, AlignmentPath, LogPosteriorGrid, TokenSegmentation,
};
use crate::error::{Error, Result};
use crate::loss::{iterated_loss, smoothed_ce, LossBreakdown, LossTerms};
use crate::nn::{ForwardCtx, Init, LayerNorm, Linear, Mode, ParamBuilder, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Frontend, conformer blocks and the CTC projections.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub frontend: Frontend,
    pub blocks: Vec<EncoderBlock>,
    pub ctc_final: Linear,
    /// Block count after which the middle head taps, and its projection.
    pub ctc_mid: Option<(usize, Linear)>,
}

pub struct EncoderOutput {
    pub h: Var,
    pub ctc_final: Var,
    pub ctc_mid: Option<Var>,
}

impl Encoder {
    fn build(b: &mut ParamBuilder, cfg: &ModelConfig, with_mid: bool) -> Result<Self> {
        let frontend = Frontend::build(b, "frontend", cfg.feat_dim, cfg.frontend_channels, cfg.d_att)?;
        let blocks = (0..cfg.n_enc)
            .map(|i| EncoderBlock::build(b, &format!("encoder.{i}"), cfg.d_att, cfg.n_heads, cfg.d_ff, cfg.k_enc, cfg.enc_kernel))
            .collect::<Result<_>>()?;
        let ctc_final = b.linear("ctc.final", cfg.d_att, cfg.vocab)?;
        let ctc_mid = if with_mid { Some((cfg.enc_middle, b.linear("ctc.mid", cfg.d_att, cfg.vocab)?)) } else { None };
        Ok(Self { frontend, blocks, ctc_final, ctc_mid })
    }

    /// `x: T×F`; the middle head is evaluated only when `with_middle`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var, with_middle: bool) -> Result<EncoderOutput> {
        let frames = ctx.tape.value(x).rows();
        if frames < 4 {
            return Err(Error::Usage(format!("utterance has {frames} frames; at least 4 are required")));
        }
        let mut h = self.frontend.forward(ctx, x)?;
        let mask = make_bimask(ctx.tape.value(h).rows(), ctx.tape.value(h).rows())?;
        let mut mid = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(ctx, h, &mask)?;
            if let (true, Some((at, proj))) = (with_middle, &self.ctc_mid) {
                if i + 1 == *at {
                    let logits = proj.forward(ctx, h)?;
                    mid = Some(ctx.tape.log_softmax(logits)?);
                }
            }
        }
        let logits = self.ctc_final.forward(ctx, h)?;
        let ctc_final = ctx.tape.log_softmax(logits)?;
        Ok(EncoderOutput { h, ctc_final, ctc_mid: mid })
    }
}

fn grid_of(ctx: &ForwardCtx<'_>, log_probs: Var) -> Result<LogPosteriorGrid> {
    let t = ctx.tape.value(log_probs);
    LogPosteriorGrid::from_log_probs(t.rows(), t.cols(), t.data().to_vec())
}

fn all_true(rows: usize, cols: usize) -> Result<MaskMatrix> {
    MaskMatrix::from_fn(rows, cols, |_, _| true)
}

/// Result of one decode: tokens, each token's log-posterior and the number
/// of decoder forward passes spent.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub tokens: Vec<usize>,
    pub log_posteriors: Vec<f64>,
    pub decoder_passes: usize,
}

impl Decoded {
    fn empty() -> Self {
        Self { tokens: Vec::new(), log_posteriors: Vec::new(), decoder_passes: 0 }
    }

    /// Mean per-token log-posterior; 0 for an empty output.
    pub fn mean_log_posterior(&self) -> f64 {
        if self.log_posteriors.is_empty() {
            0.0
        } else {
            self.log_posteriors.iter().sum::<f64>() / self.log_posteriors.len() as f64
        }
    }
}

/// One ranked candidate from [`CassNat::decode_nbest`].
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub score: f64,
    pub alignment: AlignmentPath,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NBest {
    pub hypotheses: Vec<Hypothesis>,
    pub decoder_passes: usize,
}

pub struct DecoderOutput {
    /// Token acoustic embeddings (extractor output).
    pub embeddings: Var,
    /// Final MAD output before the projection.
    pub states: Var,
    pub dec_final: Var,
    pub dec_mid: Option<Var>,
}

pub struct ForwardArtifacts {
    pub encoder: EncoderOutput,
    pub alignment: AlignmentPath,
    pub segments: TokenSegmentation,
    pub expanded: TokenSegmentation,
    pub decoder: DecoderOutput,
}

/// Encoder, CTC-driven token segmentation, extractor, SAD and MAD stacks.
#[derive(Clone, Debug)]
pub struct CassNat {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub tae: TokenAcousticExtractor,
    pub sad: Vec<SadBlock>,
    pub mad: Vec<MadBlock>,
    pub out_final: Linear,
    pub out_mid: Linear,
}

impl CassNat {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if cfg.n_tae != 1 {
            return Err(Error::Config(format!("n_tae must be 1, got {}", cfg.n_tae)));
        }
        let mut b = ParamBuilder::new(seed);
        let d = cfg.d_att;
        let classes = cfg.vocab - 1;
        let model = Self {
            cfg: cfg.clone(),
            encoder: Encoder::build(&mut b, cfg, true)?,
            tae: TokenAcousticExtractor::build(&mut b, "tae", d, cfg.n_heads, cfg.d_ff)?,
            sad: (0..cfg.n_sad)
                .map(|i| SadBlock::build(&mut b, &format!("sad.{i}"), d, cfg.n_heads, cfg.d_ff, cfg.k_dec))
                .collect::<Result<_>>()?,
            mad: (0..cfg.n_mad)
                .map(|i| MadBlock::build(&mut b, &format!("mad.{i}"), d, cfg.n_heads, cfg.d_ff, cfg.k_dec, cfg.dec_kernel))
                .collect::<Result<_>>()?,
            out_final: b.linear("out.final", d, classes)?,
            out_mid: b.linear("out.mid", d, classes)?,
        };
        Ok((model, b.finish()))
    }

    pub fn encode(&self, ctx: &mut ForwardCtx<'_>, x: Var, with_middle: bool) -> Result<EncoderOutput> {
        self.encoder.forward(ctx, x, with_middle)
    }

    /// One decoder pass over expanded segments. Output rows are log
    /// posteriors over tokens, column `c` standing for token `c + 1`.
    pub fn decoder(
        &self,
        ctx: &mut ForwardCtx<'_>,
        h: Var,
        expanded: &TokenSegmentation,
        with_middle: bool,
    ) -> Result<DecoderOutput> {
        let frames = ctx.tape.value(h).rows();
        let u = expanded.len();
        let trigger = make_trigger_mask(expanded, frames)?;
        let self_mask = make_bimask(u, u)?;
        let cross_mask = all_true(u, frames)?;
        let embeddings = self.tae.forward(ctx, h, &trigger)?;
        let mut s = embeddings;
        for blk in &self.sad {
            s = blk.forward(ctx, s, &self_mask)?;
        }
        let mut dec_mid = None;
        for (i, blk) in self.mad.iter().enumerate() {
            s = blk.forward(ctx, s, h, &self_mask, &cross_mask)?;
            if with_middle && i + 1 == self.cfg.mad_middle {
                let logits = self.out_mid.forward(ctx, s)?;
                dec_mid = Some(ctx.tape.log_softmax(logits)?);
            }
        }
        let logits = self.out_final.forward(ctx, s)?;
        let dec_final = ctx.tape.log_softmax(logits)?;
        Ok(DecoderOutput { embeddings, states: s, dec_final, dec_mid })
    }

    /// Training forward: forced alignment of `y` against the final CTC grid
    /// defines the token segments fed to the decoder.
    pub fn forward_train(&self, ctx: &mut ForwardCtx<'_>, x: &Tensor, y: &[usize]) -> Result<ForwardArtifacts> {
        let xv = ctx.tape.constant(x.clone());
        let encoder = self.encode(ctx, xv, true)?;
        let grid = grid_of(ctx, encoder.ctc_final)?;
        let alignment = ctc_forced_align(&grid, y)?;
        let segments = alignment_to_segments(&alignment)?;
        let expanded = expand_segments(&segments, self.cfg.trigger_context, grid.frames());
        let decoder = self.decoder(ctx, encoder.h, &expanded, true)?;
        Ok(ForwardArtifacts { encoder, alignment, segments, expanded, decoder })
    }

    pub fn loss_terms(
        &self,
        ctx: &mut ForwardCtx<'_>,
        art: &ForwardArtifacts,
        y: &[usize],
        loss: &LossConfig,
    ) -> Result<LossTerms<Var>> {
        let rows = ctx.tape.value(art.decoder.dec_final).rows();
        if rows != y.len() {
            return Err(Error::dim("loss", format!("{rows} decoder rows for {} labels", y.len())));
        }
        let classes: Vec<usize> = y.iter().map(|&t| t - 1).collect();
        let eps = loss.label_smoothing;
        let ctc_final = ctc_loss_on_tape(&mut ctx.tape, art.encoder.ctc_final, y)?;
        let ctc_mid = art.encoder.ctc_mid.map(|m| ctc_loss_on_tape(&mut ctx.tape, m, y)).transpose()?;
        let ce_final = smoothed_ce(&mut ctx.tape, art.decoder.dec_final, &classes, eps)?;
        let ce_mid = art.decoder.dec_mid.map(|m| smoothed_ce(&mut ctx.tape, m, &classes, eps)).transpose()?;
        Ok(LossTerms { ctc_final, ctc_mid, ce_final, ce_mid })
    }

    pub fn training_loss(
        &self,
        ctx: &mut ForwardCtx<'_>,
        x: &Tensor,
        y: &[usize],
        loss: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        let art = self.forward_train(ctx, x, y)?;
        let terms = self.loss_terms(ctx, &art, y, loss)?;
        let total = iterated_loss(&mut ctx.tape, &terms, loss)?;
        Ok((total, LossBreakdown::read(&ctx.tape, total, &terms)))
    }

    /// Runs the decoder once over `segments` and reads off per-token argmaxes.
    pub fn decode_segments(&self, ctx: &mut ForwardCtx<'_>, h: Var, segments: &TokenSegmentation) -> Result<Decoded> {
        let frames = ctx.tape.value(h).rows();
        let expanded = expand_segments(segments, self.cfg.trigger_context, frames);
        let out = self.decoder(ctx, h, &expanded, false)?;
        let lp = ctx.tape.value(out.dec_final);
        let mut tokens = Vec::with_capacity(lp.rows());
        let mut log_posteriors = Vec::with_capacity(lp.rows());
        for u in 0..lp.rows() {
            let row = lp.row(u);
            let best = (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b });
            tokens.push(best + 1);
            log_posteriors.push(row[best]);
        }
        Ok(Decoded { tokens, log_posteriors, decoder_passes: 1 })
    }

    /// Best-path CTC alignment, then exactly one decoder pass.
    pub fn decode_greedy(&self, store: &ParamStore, x: &Tensor) -> Result<Decoded> {
        let mut ctx = ForwardCtx::new(store, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let enc = self.encode(&mut ctx, xv, false)?;
        let grid = grid_of(&ctx, enc.ctc_final)?;
        let path = best_path_decode(&grid);
        if collapse(&path.labels).is_empty() {
            return Ok(Decoded::empty());
        }
        let segments = alignment_to_segments(&path)?;
        self.decode_segments(&mut ctx, enc.h, &segments)
    }

    /// Decodes each of the `beam` best frame paths and ranks the results by
    /// mean decoder log-posterior. Empty candidates rank last.
    pub fn decode_nbest(&self, store: &ParamStore, x: &Tensor, beam: usize) -> Result<NBest> {
        let mut ctx = ForwardCtx::new(store, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let enc = self.encode(&mut ctx, xv, false)?;
        let grid = grid_of(&ctx, enc.ctc_final)?;
        let mut hypotheses = Vec::new();
        let mut passes = 0;
        for alignment in beam_align_nbest(&grid, beam)? {
            if collapse(&alignment.labels).is_empty() {
                hypotheses.push(Hypothesis { tokens: Vec::new(), score: f64::NEG_INFINITY, alignment });
                continue;
            }
            let d = self.decode_segments(&mut ctx, enc.h, &alignment_to_segments(&alignment)?)?;
            passes += d.decoder_passes;
            hypotheses.push(Hypothesis { score: d.mean_log_posterior(), tokens: d.tokens, alignment });
        }
        hypotheses.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(NBest { hypotheses, decoder_passes: passes })
    }
}

/// Pre-norm decoder layer with causal self-attention and cross-attention.
#[derive(Clone, Debug)]
pub struct AtDecoderBlock {
    pub name: String,
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl AtDecoderBlock {
    fn build(b: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_att;
        Ok(Self {
            name: name.to_string(),
            ln1: b.layer_norm(&format!("{name}.ln1"), d)?,
            self_attn: MultiHeadAttention::build(b, &format!("{name}.self_attn"), d, cfg.n_heads, None)?,
            ln2: b.layer_norm(&format!("{name}.ln2"), d)?,
            cross_attn: MultiHeadAttention::build(b, &format!("{name}.cross_attn"), d, cfg.n_heads, None)?,
            ln3: b.layer_norm(&format!("{name}.ln3"), d)?,
            ffn: FeedForward::build(b, &format!("{name}.ffn"), d, cfg.d_ff)?,
        })
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_>, s: Var, h: Var, causal: &MaskMatrix, cross: &MaskMatrix) -> Result<Var> {
        let n = self.ln1.forward(ctx, s)?;
        let (a, w) = self.self_attn.forward(ctx, n, n, causal)?;
        ctx.record_attention(&format!("{}.self", self.name), &w);
        let a = ctx.dropout(a)?;
        let s = ctx.tape.add(s, a)?;
        let n = self.ln2.forward(ctx, s)?;
        let (a, w) = self.cross_attn.forward(ctx, n, h, cross)?;
        ctx.record_attention(&format!("{}.cross", self.name), &w);
        let a = ctx.dropout(a)?;
        let s = ctx.tape.add(s, a)?;
        let n = self.ln3.forward(ctx, s)?;
        let f = self.ffn.forward(ctx, n)?;
        let f = ctx.dropout(f)?;
        ctx.tape.add(s, f)
    }
}

/// Sequence boundary in the autoregressive view: start symbol on the input
/// side, end symbol on the output side. It reuses the CTC blank id, which
/// the decoder never has to emit as a token.
pub const AT_BOUNDARY: usize = 0;

/// Same encoder, standard autoregressive transformer decoder.
#[derive(Clone, Debug)]
pub struct AtBaseline {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub embed: ParamId,
    pub blocks: Vec<AtDecoderBlock>,
    pub final_ln: LayerNorm,
    pub out: Linear,
}

impl AtBaseline {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed);
        let model = Self {
            cfg: cfg.clone(),
            encoder: Encoder::build(&mut b, cfg, false)?,
            embed: b.tensor("at.embed", &[cfg.vocab, cfg.d_att], Init::Normal(1.0))?,
            blocks: (0..cfg.at_dec_blocks)
                .map(|i| AtDecoderBlock::build(&mut b, &format!("at.dec.{i}"), cfg))
                .collect::<Result<_>>()?,
            final_ln: b.layer_norm("at.final_ln", cfg.d_att)?,
            out: b.linear("at.out", cfg.d_att, cfg.vocab)?,
        };
        Ok((model, b.finish()))
    }

    /// Log-probabilities of the next symbol for every prefix position of
    /// `inputs` (which start with the boundary symbol).
    pub fn decoder(&self, ctx: &mut ForwardCtx<'_>, h: Var, inputs: &[usize]) -> Result<Var> {
        let n = inputs.len();
        let frames = ctx.tape.value(h).rows();
        let table = ctx.p(self.embed);
        let e = ctx.tape.embedding(table, inputs)?;
        let pe = ctx.tape.constant(sinusoidal_positions(n, self.cfg.d_att));
        let mut s = ctx.tape.add(e, pe)?;
        s = ctx.dropout(s)?;
        let causal = make_causal_mask(n)?;
        let cross = all_true(n, frames)?;
        // The encoder only carries relative positions; cross-attention gets
        // absolute frame positions so repeated tokens can be told apart.
        let frame_pe = ctx.tape.constant(sinusoidal_positions(frames, self.cfg.d_att));
        let memory = ctx.tape.add(h, frame_pe)?;
        for blk in &self.blocks {
            s = blk.forward(ctx, s, memory, &causal, &cross)?;
        }
        let s = self.final_ln.forward(ctx, s)?;
        let logits = self.out.forward(ctx, s)?;
        ctx.tape.log_softmax(logits)
    }

    /// Hybrid objective: `g·CTC + (1 − g)·CE` with teacher forcing.
    pub fn training_loss(
        &self,
        ctx: &mut ForwardCtx<'_>,
        x: &Tensor,
        y: &[usize],
        loss: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        let xv = ctx.tape.constant(x.clone());
        let enc = self.encoder.forward(ctx, xv, false)?;
        let inputs: Vec<usize> = std::iter::once(AT_BOUNDARY).chain(y.iter().copied()).collect();
        let targets: Vec<usize> = y.iter().copied().chain(std::iter::once(AT_BOUNDARY)).collect();
        let lp = self.decoder(ctx, enc.h, &inputs)?;
        let ctc_final = ctc_loss_on_tape(&mut ctx.tape, enc.ctc_final, y)?;
        let ce_final = smoothed_ce(&mut ctx.tape, lp, &targets, loss.label_smoothing)?;
        let terms = LossTerms { ctc_final, ctc_mid: None, ce_final, ce_mid: None };
        let total = iterated_loss(&mut ctx.tape, &terms, &loss.final_only())?;
        Ok((total, LossBreakdown::read(&ctx.tape, total, &terms)))
    }

    /// Greedy decoding from an encoder output. With `forced_len` the end
    /// symbol is ignored until that many tokens are out; otherwise decoding
    /// stops at the end symbol or after `2·T′` tokens.
    pub fn decode_from(&self, ctx: &mut ForwardCtx<'_>, h: Var, forced_len: Option<usize>) -> Result<Decoded> {
        let cap = forced_len.unwrap_or(2 * ctx.tape.value(h).rows());
        let mut inputs = vec![AT_BOUNDARY];
        let mut out = Decoded::empty();
        loop {
            let lp = self.decoder(ctx, h, &inputs)?;
            out.decoder_passes += 1;
            let row = ctx.tape.value(lp).row(inputs.len() - 1).to_vec();
            let emitted = inputs.len() - 1;
            if emitted == cap {
                break;
            }
            let best = match forced_len {
                Some(_) => (1..row.len()).fold(1, |b, k| if row[k] > row[b] { k } else { b }),
                None => (0..row.len()).fold(0, |b, k| if row[k] > row[b] { k } else { b }),
            };
            if best == AT_BOUNDARY {
                break;
            }
            out.tokens.push(best);
            out.log_posteriors.push(row[best]);
            inputs.push(best);
        }
        Ok(out)
    }

    pub fn decode(&self, store: &ParamStore, x: &Tensor) -> Result<Decoded> {
        let mut ctx = ForwardCtx::new(store, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let enc = self.encoder.forward(&mut ctx, xv, false)?;
        self.decode_from(&mut ctx, enc.h, None)
    }
}

/// Parameters shared between the two model families.
pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("frontend.") || name.starts_with("encoder.") || name.starts_with("ctc.final.")
}

/// Copies frontend, encoder and final CTC head from a baseline store.
/// Returns the number of tensors copied.
pub fn init_encoder_from_at(at: &ParamStore, nat: &mut ParamStore) -> Result<usize> {
    let mut copied = 0;
    for (name, t) in at.iter().filter(|(n, _)| is_encoder_param(n)) {
        nat.set(name, t.clone())?;
        copied += 1;
    }
    Ok(copied)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    CassNat,
    AtBaseline,
}

impl ModelKind {
    pub fn tag(self) -> &'static str {
        match self {
            ModelKind::CassNat => "cassnat",
            ModelKind::AtBaseline => "at",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "cassnat" => Ok(ModelKind::CassNat),
            "at" => Ok(ModelKind::AtBaseline),
            other => Err(Error::Checkpoint(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Either model behind one interface for training and decoding.
#[derive(Clone, Debug)]
pub enum Model {
    CassNat(CassNat),
    At(AtBaseline),
}

impl Model {
    pub fn build(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        Ok(match kind {
            ModelKind::CassNat => {
                let (m, s) = CassNat::build(cfg, seed)?;
                (Model::CassNat(m), s)
            }
            ModelKind::AtBaseline => {
                let (m, s) = AtBaseline::build(cfg, seed)?;
                (Model::At(m), s)
            }
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::CassNat(_) => ModelKind::CassNat,
            Model::At(_) => ModelKind::AtBaseline,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::CassNat(m) => &m.cfg,
            Model::At(m) => &m.cfg,
        }
    }

    pub fn training_loss(
        &self,
        ctx: &mut ForwardCtx<'_>,
        x: &Tensor,
        y: &[usize],
        loss: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        match self {
            Model::CassNat(m) => m.training_loss(ctx, x, y, loss),
            Model::At(m) => m.training_loss(ctx, x, y, loss),
        }
    }

    pub fn decode(&self, store: &ParamStore, x: &Tensor) -> Result<Decoded> {
        match self {
            Model::CassNat(m) => m.decode_greedy(store, x),
            Model::At(m) => m.decode(store, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_params;
    use crate::tensor::log_sum_exp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            feat_dim: 8,
            frontend_channels: 2,
            d_att: 8,
            n_heads: 2,
            d_ff: 12,
            n_enc: 2,
            enc_middle: 1,
            n_sad: 1,
            n_mad: 2,
            mad_middle: 1,
            k_enc: 3,
            k_dec: 2,
            enc_kernel: 3,
            dec_kernel: 3,
            vocab: 4,
            at_dec_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn features(t: usize, f: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new([t, f], (0..t * f).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn encoder_shapes_and_normalization() {
        let cfg = toy_config();
        let (m, store) = CassNat::build(&cfg, 1).unwrap();
        for t in [4, 9, 16] {
            let mut ctx = ForwardCtx::new(&store, Mode::Eval);
            let x = ctx.tape.constant(features(t, 8, t as u64));
            let enc = m.encode(&mut ctx, x, true).unwrap();
            let tp = t.div_ceil(2).div_ceil(2);
            assert_eq!(ctx.tape.shape(enc.h), &[tp, 8]);
            for v in [enc.ctc_final, enc.ctc_mid.unwrap()] {
                let g = ctx.tape.value(v);
                assert_eq!(g.shape(), &[tp, 4]);
                for r in 0..tp {
                    assert!(log_sum_exp(g.row(r)).abs() < 1e-12);
                }
            }
        }
        let mut ctx = ForwardCtx::new(&store, Mode::Eval);
        let x = ctx.tape.constant(features(3, 8, 1));
        assert!(m.encode(&mut ctx, x, false).is_err());
    }

    #[test]
    fn training_rows_equal_label_count() {
        let cfg = toy_config();
        let (m, store) = CassNat::build(&cfg, 2).unwrap();
        let x = features(24, 8, 3);
        for y in [vec![1], vec![2, 3], vec![3, 3, 1]] {
            let mut ctx = ForwardCtx::new(&store, Mode::Eval);
            let art = m.forward_train(&mut ctx, &x, &y).unwrap();
            assert_eq!(ctx.tape.value(art.decoder.dec_final).rows(), y.len());
            assert_eq!(art.segments.tokens(), y);
        }
        let mut ctx = ForwardCtx::new(&store, Mode::Eval);
        assert!(matches!(m.forward_train(&mut ctx, &x, &[1, 1, 1, 1]), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn token_embedding_ignores_frames_outside_segment() {
        let cfg = ModelConfig { trigger_context: 0, ..toy_config() };
        let (m, store) = CassNat::build(&cfg, 3).unwrap();
        let mut ctx = ForwardCtx::new(&store, Mode::Eval);
        let x = ctx.tape.constant(features(24, 8, 4));
        let enc = m.encode(&mut ctx, x, false).unwrap();
        let h = ctx.tape.value(enc.h).clone();
        let seg = TokenSegmentation::new(vec![crate::ctc::Segment { token: 2, start: 2, end: 4 }]).unwrap();
        let embed = |h: &Tensor| {
            let mut ctx = ForwardCtx::new(&store, Mode::Eval);
            let hv = ctx.tape.constant(h.clone());
            let out = m.decoder(&mut ctx, hv, &seg, false).unwrap();
            ctx.tape.value(out.embeddings).clone()
        };
        let base = embed(&h);
        for frame in [0, 4, 5] {
            let mut p = h.clone();
            p.data_mut()[frame * 8..(frame + 1) * 8].iter_mut().for_each(|v| *v += 5.0);
            assert_eq!(embed(&p), base);
        }
        let mut p = h.clone();
        p.data_mut()[8] += 1.0;
        assert_ne!(embed(&p), base);
    }

    #[test]
    fn output_projection_never_feeds_back() {
        let cfg = toy_config();
        let (m, mut store) = CassNat::build(&cfg, 4).unwrap();
        let x = features(20, 8, 5);
        let states = |store: &ParamStore| {
            let mut ctx = ForwardCtx::new(store, Mode::Eval);
            let art = m.forward_train(&mut ctx, &x, &[1, 2]).unwrap();
            (ctx.tape.value(art.decoder.states).clone(), ctx.tape.value(art.decoder.dec_final).clone())
        };
        let (s0, d0) = states(&store);
        let id = store.id("out.final.w").unwrap();
        store.get_mut(id).data_mut()[0] += 3.0;
        let (s1, d1) = states(&store);
        assert_eq!(s0, s1);
        assert_ne!(d0, d1);
    }

    #[test]
    fn greedy_decode_single_pass_and_empty_case() {
        let cfg = toy_config();
        let (m, mut store) = CassNat::build(&cfg, 5).unwrap();
        for seed in 0..10 {
            let d = m.decode_greedy(&store, &features(20, 8, seed)).unwrap();
            assert_eq!(d.decoder_passes, usize::from(!d.tokens.is_empty()));
            assert_eq!(d.tokens.len(), d.log_posteriors.len());
        }
        // force an all-blank CTC argmax
        let b = store.id("ctc.final.b").unwrap();
        store.get_mut(b).data_mut()[0] = 1e3;
        let d = m.decode_greedy(&store, &features(20, 8, 1)).unwrap();
        assert_eq!(d, Decoded::empty());
    }

    #[test]
    fn decode_is_deterministic() {
        let (m, store) = CassNat::build(&toy_config(), 6).unwrap();
        let x = features(20, 8, 2);
        assert_eq!(m.decode_greedy(&store, &x).unwrap(), m.decode_greedy(&store, &x).unwrap());
    }

    #[test]
    fn nbest_beam_one_equals_greedy_and_is_sorted() {
        let cfg = toy_config();
        let (m, store) = CassNat::build(&cfg, 7).unwrap();
        let mut flipped = false;
        for seed in 0..12 {
            let x = features(20, 8, seed);
            let g = m.decode_greedy(&store, &x).unwrap();
            let one = m.decode_nbest(&store, &x, 1).unwrap();
            assert_eq!(one.hypotheses[0].tokens, g.tokens);
            assert_eq!(one.decoder_passes, g.decoder_passes);
            let four = m.decode_nbest(&store, &x, 4).unwrap();
            assert!(four.decoder_passes <= 4);
            assert!(four.hypotheses.windows(2).all(|w| w[0].score >= w[1].score));
            let ctc_order: Vec<_> = four.hypotheses.iter().map(|h| h.alignment.log_prob).collect();
            flipped |= ctc_order.windows(2).any(|w| w[0] < w[1]);
        }
        assert!(flipped, "decoder ranking never departed from CTC order");
    }

    #[test]
    fn at_decode_counts_passes() {
        let cfg = toy_config();
        let (m, mut store) = AtBaseline::build(&cfg, 8).unwrap();
        let x = features(20, 8, 1);
        let d = m.decode(&store, &x).unwrap();
        assert_eq!(d.decoder_passes, d.tokens.len() + 1);
        assert!(d.tokens.len() <= 2 * 5);
        for len in [0, 3, 7] {
            let mut ctx = ForwardCtx::new(&store, Mode::Eval);
            let xv = ctx.tape.constant(x.clone());
            let enc = m.encoder.forward(&mut ctx, xv, false).unwrap();
            let d = m.decode_from(&mut ctx, enc.h, Some(len)).unwrap();
            assert_eq!((d.tokens.len(), d.decoder_passes), (len, len + 1));
        }
        // end symbol first
        let b = store.id("at.out.b").unwrap();
        store.get_mut(b).data_mut()[AT_BOUNDARY] = 1e3;
        let d = m.decode(&store, &x).unwrap();
        assert_eq!((d.tokens.len(), d.decoder_passes), (0, 1));
    }

    #[test]
    fn encoder_transfer_copies_only_shared_tensors() {
        let cfg = toy_config();
        let (_, at) = AtBaseline::build(&cfg, 9).unwrap();
        let (_, mut nat) = CassNat::build(&cfg, 10).unwrap();
        let before = nat.clone();
        let n = init_encoder_from_at(&at, &mut nat).unwrap();
        assert!(n > 0);
        for (name, t) in nat.iter() {
            if is_encoder_param(name) {
                assert_eq!(t, at.by_name(name).unwrap());
            } else {
                assert_eq!(t, before.by_name(name).unwrap());
            }
        }
        let wide = ModelConfig { d_att: 12, n_heads: 2, ..cfg };
        let (_, at_wide) = AtBaseline::build(&wide, 9).unwrap();
        let err = init_encoder_from_at(&at_wide, &mut nat).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("frontend.proj.w")), "{err}");
    }

    #[test]
    fn full_objective_gradients() {
        let cfg = ModelConfig { frontend_channels: 2, ..toy_config() };
        let (m, store) = CassNat::build(&cfg, 11).unwrap();
        let x = features(8, 8, 6);
        let y = [1, 2];
        let loss = LossConfig::default();
        let reports = grad_check_params(
            &store,
            |ctx| Ok(m.training_loss(ctx, &x, &y, &loss)?.0),
            1e-5,
            1e-4,
            3,
            12,
        )
        .unwrap();
        for (name, r) in &reports {
            assert!(r.passed(), "{name}: {:?}", r.worst());
        }
    }

    #[test]
    fn pure_ctc_weight_gives_ctc_loss() {
        let cfg = toy_config();
        let (m, store) = CassNat::build(&cfg, 12).unwrap();
        let x = features(16, 8, 7);
        let loss = LossConfig { global_ctc_weight: 1.0, lambda_ctc: 1.0, ..LossConfig::default() };
        let mut ctx = ForwardCtx::new(&store, Mode::Eval);
        let (_, br) = m.training_loss(&mut ctx, &x, &[2, 1], &loss).unwrap();
        let mut ctx = ForwardCtx::new(&store, Mode::Eval);
        let xv = ctx.tape.constant(x.clone());
        let enc = m.encode(&mut ctx, xv, false).unwrap();
        let want = crate::ctc::ctc_loss(&grid_of(&ctx, enc.ctc_final).unwrap(), &[2, 1]).unwrap();
        assert_eq!(br.total, want);
    }
}
