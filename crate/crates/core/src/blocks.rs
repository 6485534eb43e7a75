//! Composite layers: convolutional frontend, half-step feed-forward,
//! convolution module, encoder block, mixed-attention decoder block,
//! self-attention decoder block and the token acoustic extractor.

use crate::attention::{MaskMatrix, MultiHeadAttention};
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Init, LayerNorm, Linear, ParamBuilder, ParamId};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Two stride-2 3×3 convolutions with swish, flattened over channel and
/// frequency, then projected to the model width.
#[derive(Clone, Debug)]
pub struct Frontend {
    conv1: (ParamId, ParamId),
    conv2: (ParamId, ParamId),
    proj: Linear,
    feat_dim: usize,
}

impl Frontend {
    pub fn build(b: &mut ParamBuilder, name: &str, feat_dim: usize, channels: usize, d_att: usize) -> Result<Self> {
        if feat_dim < 4 {
            return Err(Error::Config(format!("feat_dim {feat_dim} too small for two stride-2 reductions")));
        }
        let conv = |b: &mut ParamBuilder, n: &str, cin: usize| -> Result<(ParamId, ParamId)> {
            let init = Init::Xavier { fan_in: cin * 9, fan_out: channels * 9 };
            Ok((
                b.tensor(&format!("{name}.{n}.w"), &[channels, cin, 3, 3], init)?,
                b.tensor(&format!("{name}.{n}.b"), &[channels], Init::Zeros)?,
            ))
        };
        let conv1 = conv(b, "conv1", 1)?;
        let conv2 = conv(b, "conv2", channels)?;
        let freq = feat_dim.div_ceil(2).div_ceil(2);
        let proj = b.linear(&format!("{name}.proj"), channels * freq, d_att)?;
        Ok(Self { conv1, conv2, proj, feat_dim })
    }

    /// `x: T×F` to `T′×d_att` with `T′ = ceil(ceil(T/2)/2)`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.feat_dim {
            return Err(Error::dim("frontend", format!("expected T×{}, got {shape:?}", self.feat_dim)));
        }
        let mut h = ctx.tape.reshape(x, &[1, shape[0], shape[1]])?;
        for (w, bias) in [self.conv1, self.conv2] {
            let (w, bias) = (ctx.p(w), ctx.p(bias));
            h = ctx.tape.conv2d(h, w, bias, 2, 1)?;
            h = ctx.tape.swish(h)?;
        }
        let rows = ctx.tape.channels_to_rows(h)?;
        self.proj.forward(ctx, rows)
    }
}

/// Affine, swish, dropout, affine.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(Self { fc1: b.linear(&format!("{name}.fc1"), d, d_ff)?, fc2: b.linear(&format!("{name}.fc2"), d_ff, d)? })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = ctx.tape.swish(h)?;
        let h = ctx.dropout(h)?;
        self.fc2.forward(ctx, h)
    }

    /// `x + ½·FFN(x)`.
    pub fn half_step(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let f = self.forward(ctx, x)?;
        ctx.tape.combine(&[(x, 1.0), (f, 0.5)])
    }
}

/// Pointwise to 2d, GLU, depthwise conv over time, layer norm, swish,
/// pointwise back to d, dropout.
#[derive(Clone, Copy, Debug)]
pub struct ConvModule {
    pub pw1: Linear,
    pub dw: (ParamId, ParamId),
    pub ln: LayerNorm,
    pub pw2: Linear,
}

impl ConvModule {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel width {kernel} must be odd")));
        }
        Ok(Self {
            pw1: b.linear(&format!("{name}.pw1"), d, 2 * d)?,
            dw: (
                b.tensor(&format!("{name}.dw.w"), &[d, kernel], Init::Xavier { fan_in: kernel, fan_out: kernel })?,
                b.tensor(&format!("{name}.dw.b"), &[d], Init::Zeros)?,
            ),
            ln: b.layer_norm(&format!("{name}.ln"), d)?,
            pw2: b.linear(&format!("{name}.pw2"), d, d)?,
        })
    }

    /// The residual branch alone.
    pub fn branch(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let h = self.pw1.forward(ctx, x)?;
        let h = ctx.tape.glu(h)?;
        let (w, bias) = (ctx.p(self.dw.0), ctx.p(self.dw.1));
        let h = ctx.tape.depthwise_conv1d(h, w, bias)?;
        let h = self.ln.forward(ctx, h)?;
        let h = ctx.tape.swish(h)?;
        let h = self.pw2.forward(ctx, h)?;
        ctx.dropout(h)
    }

    /// `x + branch(x)`.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let c = self.branch(ctx, x)?;
        ctx.tape.add(x, c)
    }
}

/// Self-attention with layer norm on the attention output inside the
/// residual, shared by the encoder and MAD blocks.
fn post_norm_attention(
    ctx: &mut ForwardCtx<'_>,
    attn: &MultiHeadAttention,
    ln: &LayerNorm,
    layer: &str,
    x_q: Var,
    x_kv: Var,
    mask: &MaskMatrix,
) -> Result<Var> {
    let (a, w) = attn.forward(ctx, x_q, x_kv, mask)?;
    ctx.record_attention(layer, &w);
    let a = ctx.dropout(a)?;
    let a = ln.forward(ctx, a)?;
    ctx.tape.add(x_q, a)
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub name: String,
    pub ffn1: FeedForward,
    pub attn: MultiHeadAttention,
    pub attn_ln: LayerNorm,
    pub conv: ConvModule,
    pub ffn2: FeedForward,
    pub out_ln: LayerNorm,
}

impl EncoderBlock {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rel_k: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            ffn1: FeedForward::build(b, &format!("{name}.ffn1"), d, d_ff)?,
            attn: MultiHeadAttention::build(b, &format!("{name}.attn"), d, heads, Some(rel_k))?,
            attn_ln: b.layer_norm(&format!("{name}.attn_ln"), d)?,
            conv: ConvModule::build(b, &format!("{name}.conv"), d, kernel)?,
            ffn2: FeedForward::build(b, &format!("{name}.ffn2"), d, d_ff)?,
            out_ln: b.layer_norm(&format!("{name}.out_ln"), d)?,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var, mask: &MaskMatrix) -> Result<Var> {
        let s = self.ffn1.half_step(ctx, x)?;
        let s = post_norm_attention(ctx, &self.attn, &self.attn_ln, &format!("{}.self", self.name), s, s, mask)?;
        let s = self.conv.forward(ctx, s)?;
        let s = self.ffn2.half_step(ctx, s)?;
        self.out_ln.forward(ctx, s)
    }
}

/// Mixed-attention decoder block: token self-attention, convolution and
/// cross-attention to the encoder output.
#[derive(Clone, Debug)]
pub struct MadBlock {
    pub name: String,
    pub ffn1: FeedForward,
    pub self_attn: MultiHeadAttention,
    pub self_ln: LayerNorm,
    pub conv: ConvModule,
    pub cross_attn: MultiHeadAttention,
    pub cross_ln: LayerNorm,
    pub ffn2: FeedForward,
    pub out_ln: LayerNorm,
}

impl MadBlock {
    pub fn build(
        b: &mut ParamBuilder,
        name: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        rel_k: usize,
        kernel: usize,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            ffn1: FeedForward::build(b, &format!("{name}.ffn1"), d, d_ff)?,
            self_attn: MultiHeadAttention::build(b, &format!("{name}.self_attn"), d, heads, Some(rel_k))?,
            self_ln: b.layer_norm(&format!("{name}.self_ln"), d)?,
            conv: ConvModule::build(b, &format!("{name}.conv"), d, kernel)?,
            cross_attn: MultiHeadAttention::build(b, &format!("{name}.cross_attn"), d, heads, None)?,
            cross_ln: b.layer_norm(&format!("{name}.cross_ln"), d)?,
            ffn2: FeedForward::build(b, &format!("{name}.ffn2"), d, d_ff)?,
            out_ln: b.layer_norm(&format!("{name}.out_ln"), d)?,
        })
    }

    /// `s: U×d`, `h: T′×d`, `self_mask: U×U`, `cross_mask: U×T′`.
    pub fn forward(
        &self,
        ctx: &mut ForwardCtx<'_>,
        s: Var,
        h: Var,
        self_mask: &MaskMatrix,
        cross_mask: &MaskMatrix,
    ) -> Result<Var> {
        let u = ctx.tape.value(s).rows();
        let frames = ctx.tape.value(h).rows();
        if (self_mask.rows(), self_mask.cols()) != (u, u) || (cross_mask.rows(), cross_mask.cols()) != (u, frames) {
            return Err(Error::dim(
                "mad_block",
                format!(
                    "self mask {}x{}, cross mask {}x{} for {u} tokens and {frames} frames",
                    self_mask.rows(),
                    self_mask.cols(),
                    cross_mask.rows(),
                    cross_mask.cols()
                ),
            ));
        }
        let s1 = self.ffn1.half_step(ctx, s)?;
        let s2 = post_norm_attention(ctx, &self.self_attn, &self.self_ln, &format!("{}.self", self.name), s1, s1, self_mask)?;
        let s3 = self.conv.forward(ctx, s2)?;
        let s4 = post_norm_attention(ctx, &self.cross_attn, &self.cross_ln, &format!("{}.cross", self.name), s3, h, cross_mask)?;
        let s5 = self.ffn2.half_step(ctx, s4)?;
        self.out_ln.forward(ctx, s5)
    }
}

/// Pre-norm transformer block over token embeddings (no acoustic access).
#[derive(Clone, Debug)]
pub struct SadBlock {
    pub name: String,
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl SadBlock {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, heads: usize, d_ff: usize, rel_k: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            ln1: b.layer_norm(&format!("{name}.ln1"), d)?,
            attn: MultiHeadAttention::build(b, &format!("{name}.attn"), d, heads, Some(rel_k))?,
            ln2: b.layer_norm(&format!("{name}.ln2"), d)?,
            ffn: FeedForward::build(b, &format!("{name}.ffn"), d, d_ff)?,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, s: Var, mask: &MaskMatrix) -> Result<Var> {
        let n = self.ln1.forward(ctx, s)?;
        let (a, w) = self.attn.forward(ctx, n, n, mask)?;
        ctx.record_attention(&format!("{}.self", self.name), &w);
        let a = ctx.dropout(a)?;
        let s = ctx.tape.add(s, a)?;
        let n = self.ln2.forward(ctx, s)?;
        let f = self.ffn.forward(ctx, n)?;
        let f = ctx.dropout(f)?;
        ctx.tape.add(s, f)
    }
}

/// Sinusoidal encodings for positions `1..=n`, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for pos in 1..=n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new([n, d], data).expect("positive extents")
}

/// Token acoustic extractor: position queries attend over the encoder
/// output restricted by the trigger mask, then one half-step FFN.
#[derive(Clone, Debug)]
pub struct TokenAcousticExtractor {
    pub name: String,
    pub attn: MultiHeadAttention,
    pub ffn: FeedForward,
    d: usize,
}

impl TokenAcousticExtractor {
    pub fn build(b: &mut ParamBuilder, name: &str, d: usize, heads: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            attn: MultiHeadAttention::build(b, &format!("{name}.attn"), d, heads, None)?,
            ffn: FeedForward::build(b, &format!("{name}.ffn"), d, d_ff)?,
            d,
        })
    }

    /// `h: T′×d`, `trigger: U×T′`; returns `U×d` token embeddings.
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, h: Var, trigger: &MaskMatrix) -> Result<Var> {
        let pe = ctx.tape.constant(sinusoidal_positions(trigger.rows(), self.d));
        let (a, w) = self.attn.forward(ctx, pe, h, trigger)?;
        ctx.record_attention(&format!("{}.cross", self.name), &w);
        self.ffn.half_step(ctx, a)
    }
}
