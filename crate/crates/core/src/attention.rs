//! Masked scaled dot-product attention, multi-head attention with clipped
//! relative positions, and the mask constructors.

use crate::ctc::TokenSegmentation;
use crate::error::{Error, Result};
use crate::nn::{ForwardCtx, Init, Linear, ParamBuilder, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::{dot, Tensor};

/// Boolean `n_q × n_k` attention mask; `true` permits attention.
/// Every row permits at least one key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::dim("mask", format!("{} entries for {rows}x{cols}", data.len())));
        }
        if let Some(row) = (0..rows).find(|&i| !data[i * cols..(i + 1) * cols].contains(&true)) {
            return Err(Error::Mask { row });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        let data = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self::new(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn transpose(&self) -> Result<Self> {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn intersect(&self, other: &Self) -> Result<Self> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::dim("mask intersect", format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        Self::from_fn(self.rows, self.cols, |i, j| self.get(i, j) && other.get(i, j))
    }

    /// Rendering as rows of `0`/`1`.
    pub fn to_bit_rows(&self) -> Vec<String> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }
}

/// Row `u` permits exactly the frames of token `u`'s span.
pub fn make_trigger_mask(seg: &TokenSegmentation, frames: usize) -> Result<MaskMatrix> {
    if seg.is_empty() {
        return Err(Error::NoTokens);
    }
    if seg.last_frame() > frames {
        return Err(Error::dim("trigger_mask", format!("segment ends at {} beyond {frames} frames", seg.last_frame())));
    }
    let s = seg.segments();
    MaskMatrix::from_fn(s.len(), frames, |u, t| (s[u].start..=s[u].end).contains(&(t + 1)))
}

/// Bidirectional mask over `n` positions of which the first `valid` are real.
pub fn make_bimask(n: usize, valid: usize) -> Result<MaskMatrix> {
    if valid > n {
        return Err(Error::dim("bimask", format!("valid {valid} exceeds {n}")));
    }
    MaskMatrix::from_fn(n, n, |_, j| j < valid)
}

/// Lower-triangular mask: position `i` sees positions `0..=i`.
pub fn make_causal_mask(n: usize) -> Result<MaskMatrix> {
    MaskMatrix::from_fn(n, n, |i, j| j <= i)
}

/// Learned embeddings for clipped relative distances `[-k, k]`.
#[derive(Clone, Debug)]
pub struct RelPosTable {
    pub k: usize,
    pub embeddings: Tensor,
}

impl RelPosTable {
    pub fn new(k: usize, embeddings: Tensor) -> Result<Self> {
        if embeddings.shape().len() != 2 || embeddings.rows() != 2 * k + 1 {
            return Err(Error::dim("relpos", format!("need {} rows for k={k}, got {:?}", 2 * k + 1, embeddings.shape())));
        }
        Ok(Self { k, embeddings })
    }

    /// Row used for signed distance `d = j − i`.
    pub fn index(&self, distance: isize) -> usize {
        (distance.clamp(-(self.k as isize), self.k as isize) + self.k as isize) as usize
    }
}

/// Additive logit for query `q` looking at a key `distance` positions away.
pub fn relpos_logit(q: &[f64], distance: isize, table: &RelPosTable) -> f64 {
    dot(q, table.embeddings.row(table.index(distance))) / (q.len() as f64).sqrt()
}

/// Tape-level attention for one head. `rel` carries the relative table
/// (`(2k+1) × d`) and `k`; it requires `n_q == n_k`.
pub fn attend(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &MaskMatrix,
    rel: Option<(Var, usize)>,
) -> Result<(Var, Var)> {
    let (nq, d) = tape.value(q).expect_matrix("attention")?;
    let nk = tape.value(k).rows();
    if tape.value(k).cols() != d || tape.value(v).rows() != nk {
        return Err(Error::dim(
            "attention",
            format!("Q {:?}, K {:?}, V {:?}", tape.shape(q), tape.shape(k), tape.shape(v)),
        ));
    }
    if (mask.rows(), mask.cols()) != (nq, nk) {
        return Err(Error::dim("attention", format!("mask {}x{} for {nq}x{nk} logits", mask.rows(), mask.cols())));
    }
    let mut logits = tape.matmul_nt(q, k)?;
    if let Some((table, kmax)) = rel {
        if nq != nk {
            return Err(Error::dim("attention", "relative positions need a square score matrix"));
        }
        let r = tape.matmul_nt(q, table)?;
        let r = tape.rel_gather(r, kmax)?;
        logits = tape.add(logits, r)?;
    }
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let weights = tape.masked_softmax(scaled, mask.as_slice())?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

/// Masked scaled dot-product attention on plain tensors; returns the output
/// and the attention weights.
pub fn scaled_dot_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    mask: &MaskMatrix,
    relpos: Option<&RelPosTable>,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let rel = relpos.map(|t| (tape.constant(t.embeddings.clone()), t.k));
    let (o, w) = attend(&mut tape, qv, kv, vv, mask, rel)?;
    Ok((tape.value(o).clone(), tape.value(w).clone()))
}

/// Projections for multi-head attention plus an optional relative table
/// shared by all heads.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d_att: usize,
    pub relpos: Option<(ParamId, usize)>,
}

impl MultiHeadAttention {
    pub fn build(b: &mut ParamBuilder, name: &str, d_att: usize, heads: usize, rel_k: Option<usize>) -> Result<Self> {
        if heads == 0 || d_att % heads != 0 {
            return Err(Error::Config(format!("d_att {d_att} not divisible by {heads} heads")));
        }
        let d_head = d_att / heads;
        let relpos = match rel_k {
            Some(k) => Some((b.tensor(&format!("{name}.relpos"), &[2 * k + 1, d_head], Init::Normal(0.1))?, k)),
            None => None,
        };
        Ok(Self {
            q: b.linear(&format!("{name}.q"), d_att, d_att)?,
            k: b.linear(&format!("{name}.k"), d_att, d_att)?,
            v: b.linear(&format!("{name}.v"), d_att, d_att)?,
            o: b.linear(&format!("{name}.o"), d_att, d_att)?,
            heads,
            d_att,
            relpos,
        })
    }

    pub fn d_head(&self) -> usize {
        self.d_att / self.heads
    }

    /// Returns the projected output and each head's weight matrix.
    pub fn forward(
        &self,
        ctx: &mut ForwardCtx<'_>,
        x_q: Var,
        x_kv: Var,
        mask: &MaskMatrix,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.q.forward(ctx, x_q)?;
        let k = self.k.forward(ctx, x_kv)?;
        let v = self.v.forward(ctx, x_kv)?;
        let rel = self.relpos.map(|(id, kmax)| (ctx.p(id), kmax));
        let dh = self.d_head();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                let t = &mut ctx.tape;
                (t.slice_cols(q, h * dh, dh)?, t.slice_cols(k, h * dh, dh)?, t.slice_cols(v, h * dh, dh)?)
            };
            let (o, w) = attend(&mut ctx.tape, qh, kh, vh, mask, rel)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = if self.heads == 1 { outs[0] } else { ctx.tape.concat_cols(&outs)? };
        Ok((self.o.forward(ctx, cat)?, weights))
    }
}
