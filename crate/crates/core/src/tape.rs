//! Reverse-mode differentiation over an explicit operation record.
//!
//! Every primitive appends one node to the [`Tape`]; nodes only reference
//! earlier nodes, so the record is topologically ordered by construction and
//! `backward` is a single reverse sweep.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Swish(Var),
    Sigmoid(Var),
    Glu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, indices: Vec<usize> },
    RelGather { r: Var, k: usize },
    DepthwiseConv1d { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ChannelsToRows(Var),
    Dropout { x: Var, scale: Vec<f64> },
    Sum(Var),
    Combine(Vec<(Var, f64)>),
    ScalarWithGrad { x: Var, grad: Arc<Vec<f64>> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::MatMulNT(..) => "matmul_nt",
            Op::Linear { .. } => "linear",
            Op::Swish(..) => "swish",
            Op::Sigmoid(..) => "sigmoid",
            Op::Glu(..) => "glu",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::MaskedSoftmax(..) => "masked_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Embedding { .. } => "embedding",
            Op::RelGather { .. } => "rel_gather",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelsToRows(..) => "channels_to_rows",
            Op::Dropout { .. } => "dropout",
            Op::Sum(..) => "sum",
            Op::Combine(..) => "combine",
            Op::ScalarWithGrad { .. } => "scalar_with_grad",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record plus accumulated leaf gradients.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(index) = value.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op.name().to_string(), index });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        self.value(v).expect_matrix(op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Adds a bias vector to every last-dimension slice of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if self.value(b).numel() != n {
            return Err(Error::dim("add_bias", format!("{:?} vs bias {:?}", self.shape(x), self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bias).for_each(|(v, bv)| *v += bv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::AddBias(x, b), &[x, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).matmul(self.value(b))?;
        self.push(t, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_nt", a)?;
        let (n, k2) = self.matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("lhs {:?} vs rhs {:?}ᵀ", self.shape(a), self.shape(b))));
        }
        let mut out = vec![0.0; m * n];
        tensor::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::new([m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    /// Affine map `x · w + b` with `w: in×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.matrix("linear", x)?;
        let (k2, n) = self.matrix("linear", w)?;
        if k != k2 {
            return Err(Error::dim("linear", format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w))));
        }
        let mut out = vec![0.0; m * n];
        if let Some(b) = b {
            if self.value(b).numel() != n {
                return Err(Error::dim("linear", format!("bias {:?} vs width {n}", self.shape(b))));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        tensor::matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(Tensor::new([m, n], out)?, Op::Linear { x, w, b }, &inputs)
    }

    pub fn swish(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * tensor::sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Swish(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| tensor::sigmoid(v)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Sigmoid(x), &[x])
    }

    /// Gated linear unit over the last dimension: `a ⊙ σ(b)` with `[a | b] = x`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).last_dim();
        if n % 2 != 0 {
            return Err(Error::dim("glu", format!("last extent {n} is odd")));
        }
        let h = n / 2;
        let mut data = Vec::with_capacity(self.value(x).numel() / 2);
        for row in self.value(x).data().chunks(n) {
            for j in 0..h {
                data.push(row[j] * tensor::sigmoid(row[h + j]));
            }
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = h;
        self.push(Tensor::new(shape, data)?, Op::Glu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).softmax_lastdim()?;
        self.push(t, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).log_softmax_lastdim()?;
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    /// Row softmax restricted to permitted entries; masked entries get weight
    /// exactly zero and never influence the result.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.matrix("masked_softmax", x)?;
        if mask.len() != r * c {
            return Err(Error::dim("masked_softmax", format!("mask has {} entries for {r}x{c}", mask.len())));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let m = &mask[i * c..(i + 1) * c];
            let row = &src[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Mask { row: i });
            }
            let o = &mut out[i * c..(i + 1) * c];
            let mut sum = 0.0;
            for j in 0..c {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= sum);
        }
        self.push(Tensor::new([r, c], out)?, Op::MaskedSoftmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let y = self.value(x).layer_norm(self.value(gamma), self.value(beta), eps)?;
        let n = self.value(x).last_dim();
        let mut xhat = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(xhat.len() / n);
        for row in xhat.chunks_mut(n) {
            let (mean, r) = tensor::moments(row, eps);
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            rstd.push(r);
        }
        self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        self.push(t, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape.to_vec())?;
        self.push(t, Op::Reshape(x), &[x])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix("concat_cols", p)?;
            if r != rows {
                return Err(Error::dim("concat_cols", format!("row counts {rows} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new([rows, total], out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks matrices with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.matrix("concat_rows", parts[0])?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix("concat_rows", p)?;
            if c != cols {
                return Err(Error::dim("concat_rows", format!("column counts {cols} vs {c}")));
            }
            out.extend_from_slice(self.value(p).data());
            rows += r;
        }
        self.push(Tensor::new([rows, cols], out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix("slice_cols", x)?;
        if start + len > c || len == 0 {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new([r, len], out)?, Op::SliceCols { x, start }, &[x])
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix("embedding", table)?;
        if indices.is_empty() {
            return Err(Error::dim("embedding", "no indices"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::dim("embedding", format!("index {i} out of {n} rows")));
            }
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::Embedding { table, indices: indices.to_vec() };
        self.push(Tensor::new([indices.len(), d], out)?, op, &[table])
    }

    /// Expands per-distance scores `r: n×(2k+1)` into an `n×n` grid with
    /// `out[i][j] = r[i][clip(j − i, −k, k) + k]`.
    pub fn rel_gather(&mut self, r: Var, k: usize) -> Result<Var> {
        let (n, w) = self.matrix("rel_gather", r)?;
        if w != 2 * k + 1 {
            return Err(Error::dim("rel_gather", format!("width {w} for k={k}")));
        }
        let src = self.value(r).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = src[i * w + rel_index(i, j, k)];
            }
        }
        self.push(Tensor::new([n, n], out)?, Op::RelGather { r, k }, &[r])
    }

    /// Per-channel 1-D convolution over time, zero padded to keep length.
    /// `x: T×C`, `w: C×K` (K odd), `b: C`.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (t, c) = self.matrix("depthwise_conv1d", x)?;
        let (c2, k) = self.matrix("depthwise_conv1d", w)?;
        if c != c2 || self.value(b).numel() != c {
            return Err(Error::dim(
                "depthwise_conv1d",
                format!("input {:?}, kernel {:?}, bias {:?}", self.shape(x), self.shape(w), self.shape(b)),
            ));
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel width {k} must be odd")));
        }
        let half = k / 2;
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; t * c];
        for ti in 0..t {
            for ch in 0..c {
                let mut s = bs[ch];
                for j in 0..k {
                    let src = ti as isize + j as isize - half as isize;
                    if src >= 0 && (src as usize) < t {
                        s += ws[ch * k + j] * xs[src as usize * c + ch];
                    }
                }
                out[ti * c + ch] = s;
            }
        }
        self.push(Tensor::new([t, c], out)?, Op::DepthwiseConv1d { x, w, b }, &[x, w, b])
    }

    /// 2-D convolution. `x: Cin×H×W`, `w: Cout×Cin×KH×KW`, `b: Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let wsh = self.shape(w);
        if xs.len() != 3 || wsh.len() != 4 || wsh[1] != xs[0] || self.value(b).numel() != wsh[0] || stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?}, kernel {:?}, bias {:?}, stride {stride}", xs, wsh, self.shape(b)),
            ));
        }
        let g = ConvGeom::new(xs, wsh, stride, pad)?;
        let n = g.ho * g.wo;
        let mut out = vec![0.0; g.cout * n];
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        for co in 0..g.cout {
            out[co * n..(co + 1) * n].fill(bd[co]);
        }
        let cols = g.im2col(xd);
        tensor::matmul_acc(wd, &cols, &mut out, g.cout, g.patch(), n);
        let t = Tensor::new([g.cout, g.ho, g.wo], out)?;
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b])
    }

    /// Re-lays `C×H×W` as `H×(C·W)`.
    pub fn channels_to_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dim("channels_to_rows", format!("expected rank 3, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    out[hi * c * w + ci * w + wi] = src[(ci * h + hi) * w + wi];
                }
            }
        }
        self.push(Tensor::new([h, c * w], out)?, Op::ChannelsToRows(x), &[x])
    }

    /// Inverted dropout with a mask drawn from `seed`. `p == 0` is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = self.value(x).data().iter().zip(&scale).map(|(v, s)| v * s).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(t, Op::Dropout { x, scale }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// `Σ cᵢ·xᵢ` over same-shaped operands.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms.first().ok_or_else(|| Error::Usage("combine needs terms".into()))?.0;
        let mut out = vec![0.0; self.value(first).numel()];
        for &(v, c) in terms {
            self.same_shape("combine", first, v)?;
            out.iter_mut().zip(self.value(v).data()).for_each(|(o, x)| *o += c * x);
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let t = Tensor::new(self.shape(first).to_vec(), out)?;
        self.push(t, Op::Combine(terms.to_vec()), &vars)
    }

    /// Records a scalar computed outside the tape together with its exact
    /// gradient with respect to `x`.
    pub fn scalar_with_grad(&mut self, x: Var, value: f64, grad: Vec<f64>) -> Result<Var> {
        if grad.len() != self.value(x).numel() {
            return Err(Error::dim("scalar_with_grad", "gradient length differs from operand"));
        }
        self.push(Tensor::scalar(value), Op::ScalarWithGrad { x, grad: Arc::new(grad) }, &[x])
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
                    slot => *slot = Some(g),
                }
                continue;
            }
            let mut acc = Acc { nodes: &self.nodes, adj: &mut adj };
            backprop(&node.op, &node.value, &g, &mut acc);
        }
        Ok(())
    }
}

pub(crate) fn rel_index(i: usize, j: usize, k: usize) -> usize {
    let d = j as isize - i as isize;
    (d.clamp(-(k as isize), k as isize) + k as isize) as usize
}

struct Acc<'a> {
    nodes: &'a [Node],
    adj: &'a mut [Option<Vec<f64>>],
}

impl Acc<'_> {
    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Runs `f` on the adjoint buffer of `v` if it participates in differentiation.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.adj[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf, self.nodes);
    }

    fn add(&mut self, v: Var, g: &[f64]) {
        self.with(v, |buf, _| buf.iter_mut().zip(g).for_each(|(b, x)| *b += x));
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (cin, h, w) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::dim("conv2d", format!("input {h}x{w} smaller than kernel {kh}x{kw}")));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { cin, h, w, cout, kh, kw, ho, wo, stride, pad })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Visits every in-bounds tap as `(patch_row, out_position, in_index)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (s, p) = (self.stride as isize, self.pad as isize);
        for ci in 0..self.cin {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    // valid ox: 0 <= ox*s + kx - p < w
                    let lo = ((p - kx as isize).max(0) + s - 1) / s;
                    let hi = (self.w as isize - 1 + p - kx as isize).div_euclid(s);
                    let hi = hi.min(self.wo as isize - 1);
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let ibase = (ci * self.h + iy as usize) * self.w;
                        for ox in lo..=hi {
                            let ix = ox * s + kx as isize - p;
                            f(r, oy * self.wo + ox as usize, ibase + ix as usize);
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into a `patch × (ho·wo)` matrix, zero where padded.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.ho * self.wo;
        let mut cols = vec![0.0; self.patch() * n];
        self.for_each_tap(|r, o, i| cols[r * n + o] = x[i]);
        cols
    }
}

fn backprop(op: &Op, out: &Tensor, g: &[f64], acc: &mut Acc<'_>) {
    match *op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc.add(a, g);
            acc.add(b, g);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (acc.val(a).data().to_vec(), acc.val(b).data().to_vec());
            acc.with(a, |buf, _| buf.iter_mut().zip(g).zip(&bv).for_each(|((d, g), y)| *d += g * y));
            acc.with(b, |buf, _| buf.iter_mut().zip(g).zip(&av).for_each(|((d, g), x)| *d += g * x));
        }
        Op::Scale(a, c) => acc.with(a, |buf, _| buf.iter_mut().zip(g).for_each(|(d, g)| *d += c * g)),
        Op::AddBias(x, b) => {
            acc.add(x, g);
            let n = acc.val(b).numel();
            acc.with(b, |buf, _| {
                for row in g.chunks(n) {
                    buf.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::MatMul(a, b) => {
            let (m, k) = (acc.val(a).rows(), acc.val(a).cols());
            let n = acc.val(b).cols();
            acc.with(a, |buf, nodes| tensor::matmul_nt_acc(g, nodes[b.0].value.data(), buf, m, n, k));
            acc.with(b, |buf, nodes| tensor::matmul_tn_acc(nodes[a.0].value.data(), g, buf, m, k, n));
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (acc.val(a).rows(), acc.val(a).cols());
            let n = acc.val(b).rows();
            acc.with(a, |buf, nodes| tensor::matmul_acc(g, nodes[b.0].value.data(), buf, m, n, k));
            acc.with(b, |buf, nodes| tensor::matmul_tn_acc(g, nodes[a.0].value.data(), buf, m, n, k));
        }
        Op::Linear { x, w, b } => {
            let (m, k) = (acc.val(x).rows(), acc.val(x).cols());
            let n = acc.val(w).cols();
            acc.with(x, |buf, nodes| tensor::matmul_nt_acc(g, nodes[w.0].value.data(), buf, m, n, k));
            acc.with(w, |buf, nodes| tensor::matmul_tn_acc(nodes[x.0].value.data(), g, buf, m, k, n));
            if let Some(b) = b {
                acc.with(b, |buf, _| {
                    for row in g.chunks(n) {
                        buf.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
        }
        Op::Swish(x) => acc.with(x, |buf, nodes| {
            for ((d, &g), &v) in buf.iter_mut().zip(g).zip(nodes[x.0].value.data()) {
                let s = tensor::sigmoid(v);
                *d += g * (s + v * s * (1.0 - s));
            }
        }),
        Op::Sigmoid(x) => acc.with(x, |buf, _| {
            for ((d, &g), &y) in buf.iter_mut().zip(g).zip(out.data()) {
                *d += g * y * (1.0 - y);
            }
        }),
        Op::Glu(x) => acc.with(x, |buf, nodes| {
            let src = nodes[x.0].value.data();
            let n = nodes[x.0].value.last_dim();
            let h = n / 2;
            for (r, grow) in g.chunks(h).enumerate() {
                let row = &src[r * n..(r + 1) * n];
                let drow = &mut buf[r * n..(r + 1) * n];
                for j in 0..h {
                    let s = tensor::sigmoid(row[h + j]);
                    drow[j] += grow[j] * s;
                    drow[h + j] += grow[j] * row[j] * s * (1.0 - s);
                }
            }
        }),
        Op::Softmax(x) | Op::MaskedSoftmax(x) => acc.with(x, |buf, _| {
            let n = out.last_dim();
            for ((drow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let s: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                for j in 0..n {
                    drow[j] += yrow[j] * (grow[j] - s);
                }
            }
        }),
        Op::LogSoftmax(x) => acc.with(x, |buf, _| {
            let n = out.last_dim();
            for ((drow, grow), yrow) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.data().chunks(n)) {
                let s: f64 = grow.iter().sum();
                for j in 0..n {
                    drow[j] += grow[j] - yrow[j].exp() * s;
                }
            }
        }),
        Op::LayerNorm { x, gamma, beta, ref xhat, ref rstd } => {
            let n = out.last_dim();
            let gam = acc.val(gamma).data().to_vec();
            acc.with(x, |buf, _| {
                let mut dxhat = vec![0.0; n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let grow = &g[r * n..(r + 1) * n];
                    let xh = &xhat[r * n..(r + 1) * n];
                    for j in 0..n {
                        dxhat[j] = grow[j] * gam[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    let drow = &mut buf[r * n..(r + 1) * n];
                    for j in 0..n {
                        drow[j] += rs * (dxhat[j] - m1 - xh[j] * m2);
                    }
                }
            });
            acc.with(gamma, |buf, _| {
                for (grow, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                    buf.iter_mut().zip(grow).zip(xh).for_each(|((d, g), x)| *d += g * x);
                }
            });
            acc.with(beta, |buf, _| {
                for grow in g.chunks(n) {
                    buf.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Transpose(x) => {
            let (r, c) = (out.rows(), out.cols());
            let gt = tensor::transpose(g, r, c);
            acc.add(x, &gt);
        }
        Op::Reshape(x) => acc.add(x, g),
        Op::Sum(x) => acc.with(x, |buf, _| buf.iter_mut().for_each(|d| *d += g[0])),
        Op::ConcatCols(ref parts) => {
            let rows = out.rows();
            let total = out.cols();
            let mut off = 0;
            for &p in parts {
                let w = acc.val(p).cols();
                acc.with(p, |buf, _| {
                    for i in 0..rows {
                        let src = &g[i * total + off..i * total + off + w];
                        buf[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(d, g)| *d += g);
                    }
                });
                off += w;
            }
        }
        Op::ConcatRows(ref parts) => {
            let mut off = 0;
            for &p in parts {
                let n = acc.val(p).numel();
                acc.add(p, &g[off..off + n]);
                off += n;
            }
        }
        Op::SliceCols { x, start } => {
            let (r, len) = (out.rows(), out.cols());
            let c = acc.val(x).cols();
            acc.with(x, |buf, _| {
                for i in 0..r {
                    let dst = &mut buf[i * c + start..i * c + start + len];
                    dst.iter_mut().zip(&g[i * len..(i + 1) * len]).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Embedding { table, ref indices } => {
            let d = out.cols();
            acc.with(table, |buf, _| {
                for (r, &idx) in indices.iter().enumerate() {
                    let dst = &mut buf[idx * d..(idx + 1) * d];
                    dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, g)| *a += g);
                }
            });
        }
        Op::RelGather { r, k } => {
            let n = out.rows();
            let w = 2 * k + 1;
            acc.with(r, |buf, _| {
                for i in 0..n {
                    for j in 0..n {
                        buf[i * w + rel_index(i, j, k)] += g[i * n + j];
                    }
                }
            });
        }
        Op::DepthwiseConv1d { x, w, b } => {
            let (t, c) = (out.rows(), out.cols());
            let k = acc.val(w).cols();
            let half = k / 2;
            let taps = |mut f: Box<dyn FnMut(usize, usize, usize) + '_>| {
                for ti in 0..t {
                    for ch in 0..c {
                        for j in 0..k {
                            let src = ti as isize + j as isize - half as isize;
                            if src >= 0 && (src as usize) < t {
                                f(ti * c + ch, src as usize * c + ch, ch * k + j);
                            }
                        }
                    }
                }
            };
            acc.with(x, |buf, nodes| {
                let wd = nodes[w.0].value.data();
                taps(Box::new(|o, i, wi| buf[i] += g[o] * wd[wi]));
            });
            acc.with(w, |buf, nodes| {
                let xd = nodes[x.0].value.data();
                taps(Box::new(|o, i, wi| buf[wi] += g[o] * xd[i]));
            });
            acc.with(b, |buf, _| {
                for row in g.chunks(c) {
                    buf.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                }
            });
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let geom = ConvGeom::new(acc.val(x).shape(), acc.val(w).shape(), stride, pad)
                .expect("geometry validated in forward");
            let plane = geom.ho * geom.wo;
            acc.with(x, |buf, nodes| {
                let wd = nodes[w.0].value.data();
                let mut dcols = vec![0.0; geom.patch() * plane];
                tensor::matmul_tn_acc(wd, g, &mut dcols, geom.cout, geom.patch(), plane);
                geom.for_each_tap(|r, o, i| buf[i] += dcols[r * plane + o]);
            });
            acc.with(w, |buf, nodes| {
                let cols = geom.im2col(nodes[x.0].value.data());
                tensor::matmul_nt_acc(g, &cols, buf, geom.cout, plane, geom.patch());
            });
            acc.with(b, |buf, _| {
                for (co, d) in buf.iter_mut().enumerate() {
                    *d += g[co * plane..(co + 1) * plane].iter().sum::<f64>();
                }
            });
        }
        Op::ChannelsToRows(x) => {
            let s = acc.val(x).shape().to_vec();
            let (c, h, w) = (s[0], s[1], s[2]);
            acc.with(x, |buf, _| {
                for ci in 0..c {
                    for hi in 0..h {
                        for wi in 0..w {
                            buf[(ci * h + hi) * w + wi] += g[hi * c * w + ci * w + wi];
                        }
                    }
                }
            });
        }
        Op::Dropout { x, ref scale } => acc.with(x, |buf, _| {
            buf.iter_mut().zip(g).zip(scale).for_each(|((d, g), s)| *d += g * s);
        }),
        Op::Combine(ref terms) => {
            for &(v, c) in terms {
                acc.with(v, |buf, _| buf.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
            }
        }
        Op::ScalarWithGrad { x, ref grad } => acc.with(x, |buf, _| {
            buf.iter_mut().zip(grad.iter()).for_each(|(d, l)| *d += g[0] * l);
        }),
    }
}
