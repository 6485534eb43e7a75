//! Named parameter storage, the per-forward context that binds parameters
//! onto a tape, and the two leaf layers everything else is built from.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Replaces a tensor by name, requiring an identical shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: shape {:?} does not match expected {:?}",
                tensor.shape(),
                self.tensors[id.0].shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    /// Element-wise mean of several stores with identical layout.
    pub fn average(stores: &[&ParamStore]) -> Result<ParamStore> {
        let first = stores.first().ok_or_else(|| Error::Usage("nothing to average".into()))?;
        let mut out = (*first).clone();
        let n = stores.len() as f64;
        for (i, t) in out.tensors.iter_mut().enumerate() {
            for s in &stores[1..] {
                if s.names.get(i) != Some(&first.names[i]) || s.tensors[i].shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("layout mismatch at {}", first.names[i])));
                }
                t.data_mut().iter_mut().zip(s.tensors[i].data()).for_each(|(a, b)| *a += b);
            }
            t.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in ±sqrt(6 / (fan_in + fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Uniform(f64),
    Normal(f64),
}

/// Registers parameters under hierarchical names with seeded initialization.
pub struct ParamBuilder {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        Self { store: ParamStore::new(), rng: rng_for(&[seed, 0x1417]) }
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-a..a)).collect()
            }
            Init::Uniform(a) => (0..n).map(|_| self.rng.gen_range(-a..a)).collect(),
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        self.store.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.tensor(&format!("{name}.w"), &[fan_in, fan_out], Init::Xavier { fan_in, fan_out })?,
            b: self.tensor(&format!("{name}.b"), &[fan_out], Init::Zeros)?,
        })
    }

    pub fn layer_norm(&mut self, name: &str, width: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.tensor(&format!("{name}.gamma"), &[width], Init::Ones)?,
            beta: self.tensor(&format!("{name}.beta"), &[width], Init::Zeros)?,
        })
    }
}

/// Whether a forward pass trains (dropout active, gradients recorded).
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { dropout: f64, seed: u64 },
}

/// One attention head's weights captured during a forward pass.
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub layer: String,
    pub head: usize,
    pub weights: Var,
}

/// A single forward pass: the tape, parameter bindings and dropout counter.
pub struct ForwardCtx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_params: bool,
    site: u64,
    retained: Option<Vec<AttentionRecord>>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        let track_params = matches!(mode, Mode::Train { .. });
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            mode,
            track_params,
            site: 0,
            retained: None,
        }
    }

    /// Records parameter gradients even in eval mode (used by gradient checks).
    pub fn with_param_grads(mut self) -> Self {
        self.track_params = true;
        self
    }

    /// Keeps every attention weight matrix for later inspection.
    pub fn retain_attention(mut self) -> Self {
        self.retained = Some(Vec::new());
        self
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.get(id).clone(), self.track_params);
        self.bound[id.0] = Some(v);
        v
    }

    /// Applies dropout at the next site; a no-op in eval mode.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        match self.mode {
            Mode::Eval => Ok(x),
            Mode::Train { dropout, seed } => {
                self.site += 1;
                self.tape.dropout(x, dropout, derive_seed(&[seed, self.site]))
            }
        }
    }

    pub fn record_attention(&mut self, layer: &str, weights: &[Var]) {
        if let Some(r) = &mut self.retained {
            for (head, &w) in weights.iter().enumerate() {
                r.push(AttentionRecord { layer: layer.to_string(), head, weights: w });
            }
        }
    }

    pub fn attention_records(&self) -> &[AttentionRecord] {
        self.retained.as_deref().unwrap_or(&[])
    }

    /// Runs backward from `loss` and returns gradients keyed by parameter.
    pub fn param_grads(&mut self, loss: Var) -> Result<Vec<(ParamId, Vec<f64>)>> {
        self.tape.backward(loss)?;
        let mut out = Vec::new();
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = self.tape.grad(*v) {
                    out.push((ParamId(i), g.to_vec()));
                }
            }
        }
        Ok(out)
    }
}

/// Affine map `x·W + b`, `W: in×out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        ctx.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        ctx.tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros([2])).unwrap();
        assert!(s.add("a", Tensor::zeros([2])).is_err());
    }

    #[test]
    fn set_checks_shape_and_names_parameter() {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::zeros([2, 2])).unwrap();
        let err = s.set("enc.w", Tensor::zeros([3])).unwrap_err().to_string();
        assert!(err.contains("enc.w"));
    }

    #[test]
    fn average_is_elementwise_mean() {
        let mut a = ParamStore::new();
        a.add("x", Tensor::new([2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut b = ParamStore::new();
        b.add("x", Tensor::new([2], vec![3.0, 6.0]).unwrap()).unwrap();
        let m = ParamStore::average(&[&a, &b]).unwrap();
        assert_eq!(m.by_name("x").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn builder_is_seeded() {
        let mk = |seed| {
            let mut b = ParamBuilder::new(seed);
            b.linear("l", 3, 4).unwrap();
            b.finish()
        };
        assert_eq!(mk(1), mk(1));
        assert_ne!(mk(1), mk(2));
    }
}
