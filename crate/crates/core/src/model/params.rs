use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Real, Tape, Tensor, Var};

use super::{ModelError, Result};

/// Position of a tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors.
///
/// Names are dotted paths (`"enc.0.kernel"`) and stay stable across runs so
/// checkpoints can be matched by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<f32>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<f32> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<f32> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    /// Replaces every tensor with the same-named, same-shaped one in `other`.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Copy with every name prefixed by `prefix`.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            names: self.names.iter().map(|n| format!("{prefix}{n}")).collect(),
            tensors: self.tensors.clone(),
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix removed.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }

    /// Appends every tensor of `other`.
    pub fn extend(&mut self, other: ParamSet) {
        for (n, t) in other.names.into_iter().zip(other.tensors) {
            self.push(n, t);
        }
    }

    /// Records every tensor on `tape`, cast to `T`.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|t| tape.leaf(t.cast(), requires_grad))
                .collect(),
        }
    }

    /// Gradients of a bound set after [`Tape::backward`], zero where a
    /// parameter did not influence the loss.
    pub fn grads<T: Real>(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Tensor<f32>> {
        self.tensors
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| match tape.grad(v) {
                Some(g) => g.cast(),
                None => Tensor::zeros(t.shape().to_vec()).expect("parameter shapes are non-empty"),
            })
            .collect()
    }
}

/// Tape handles for a [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// `U(-1/√fan_in, 1/√fan_in)`, the default for convolutions and the CAE
/// linear layers.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<f32> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape.to_vec(), -bound, bound, rng).expect("non-empty shape")
}

/// Glorot uniform for a `[fan_in, fan_out]` matrix.
pub fn xavier_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<f32> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform([fan_in, fan_out], -bound, bound, rng).expect("non-empty shape")
}

pub fn normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor<f32> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng) as f32).expect("non-empty shape")
}

/// `x · w + b` over the last dimension.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    /// CAE-style initialization (uniform in ±1/√fan_in for weight and bias).
    pub fn fan_in<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = ps.push(format!("{name}.weight"), fan_in_uniform(&[d_in, d_out], d_in, rng));
        let b = ps.push(format!("{name}.bias"), fan_in_uniform(&[d_out], d_in, rng));
        Self { w, b }
    }

    /// Transformer-style initialization (Glorot weight, zero bias).
    pub fn xavier<R: Rng + ?Sized>(ps: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let w = ps.push(format!("{name}.weight"), xavier_uniform(d_in, d_out, rng));
        let b = ps.push(format!("{name}.bias"), Tensor::zeros([d_out]).expect("d_out ≥ 1"));
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.linear(x, p.var(self.w), p.var(self.b))?)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Self {
        let gain = ps.push(format!("{name}.gain"), Tensor::full([d], 1.0).expect("d ≥ 1"));
        let bias = ps.push(format!("{name}.bias"), Tensor::zeros([d]).expect("d ≥ 1"));
        Self { gain, bias }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(tape.layer_norm_lastdim(x, p.var(self.gain), p.var(self.bias), T::lit(LAYER_NORM_EPS))?)
    }
}
