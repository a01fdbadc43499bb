//! Named parameter storage and the layers built on top of the tape.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Flat, ordered collection of named weight tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// (name, shape) per tensor, in storage order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.clone(), t.shape().to_vec()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Replaces all tensors, requiring an identical manifest.
    pub fn load_from(&mut self, other: Params<T>) -> Result<()> {
        if other.manifest() != self.manifest() {
            return Err(Error::Compatibility(
                "parameter manifest differs from the model configuration".into(),
            ));
        }
        self.tensors = other.tensors;
        Ok(())
    }

    /// Puts every tensor on the tape, as gradient leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

/// Registers freshly initialized parameters under a dotted name prefix.
pub struct ParamBuilder<'p, T: Scalar> {
    params: &'p mut Params<T>,
    rng: &'p mut ChaCha8Rng,
    prefix: String,
}

impl<'p, T: Scalar> ParamBuilder<'p, T> {
    pub fn new(params: &'p mut Params<T>, rng: &'p mut ChaCha8Rng) -> Self {
        Self {
            params,
            rng,
            prefix: String::new(),
        }
    }

    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> R) -> R {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        let mut child = ParamBuilder {
            params: self.params,
            rng: self.rng,
            prefix,
        };
        f(&mut child)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = Tensor::uniform(shape, bound, self.rng);
        self.params.push(self.full_name(name), t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::<T>::randn(shape, self.rng).scale(lit(std));
        self.params.push(self.full_name(name), t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.params.push(self.full_name(name), Tensor::full(shape, lit(value)))
    }
}

/// Seeds a builder RNG from a model seed.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, input: usize, output: usize, bias: bool) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        b.scope(name, |b| Linear {
            weight: b.uniform("weight", &[output, input], bound),
            bias: bias.then(|| b.uniform("bias", &[output], bound)),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        let y = x.matmul_nt(&p.var(self.weight));
        match self.bias {
            Some(bias) => y.add_tiled(&p.var(bias)),
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    pub fn new<T: Scalar>(
        b: &mut ParamBuilder<'_, T>,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let bound = 1.0 / ((input * kernel * kernel) as f64).sqrt();
        b.scope(name, |b| Conv2d {
            weight: b.uniform("weight", &[output, input, kernel, kernel], bound),
            bias: b.uniform("bias", &[output], bound),
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.conv2d(&p.var(self.weight), self.stride, self.pad)
            .add_channels(&p.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, channels: usize, groups: usize) -> Self {
        let groups = groups.min(channels).max(1);
        let groups = (1..=groups).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1);
        b.scope(name, |b| GroupNorm {
            gamma: b.constant("gamma", &[channels], 1.0),
            beta: b.constant("beta", &[channels], 0.0),
            groups,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.group_norm(self.groups, &p.var(self.gamma), &p.var(self.beta))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(b: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        b.scope(name, |b| LayerNorm {
            gamma: b.constant("gamma", &[dim], 1.0),
            beta: b.constant("beta", &[dim], 0.0),
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: &Var<'t, T>) -> Var<'t, T> {
        x.layer_norm(&p.var(self.gamma), &p.var(self.beta))
    }
}

/// Scaled dot-product attention, `softmax(QKᵀ/√d)·V`, over `heads` heads.
///
/// `q` is `[B, Lq, C]`, `k` and `v` are `[B, Lk, C]`; `key_valid` (`[B, Lk]`)
/// excludes padded keys.
pub fn attention<'t, T: Scalar>(
    q: &Var<'t, T>,
    k: &Var<'t, T>,
    v: &Var<'t, T>,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Var<'t, T> {
    let qs = q.shape();
    let (b, lq, c) = (qs[0], qs[1], qs[2]);
    let lk = k.shape()[1];
    assert!(c % heads == 0, "attention width {c} not divisible by {heads} heads");
    let dh = c / heads;
    let split = |x: &Var<'t, T>, l: usize| {
        if heads == 1 {
            *x
        } else {
            x.reshape(&[b, l, heads, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[b * heads, l, dh])
        }
    };
    let (qh, kh, vh) = (split(q, lq), split(k, lk), split(v, lk));
    let mut logits = qh.bmm(&kh, true).scale(1.0 / (dh as f64).sqrt());
    if let Some(valid) = key_valid {
        logits = logits.mask_keys(valid);
    }
    let out = logits.softmax_last().bmm(&vh, false);
    if heads == 1 {
        out
    } else {
        out.reshape(&[b, heads, lq, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[b, lq, c])
    }
}

/// Sinusoidal features of integer timesteps, `[t.len(), dim]`.
pub fn timestep_features<T: Scalar>(t: &[usize], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &step in t {
        for i in 0..dim {
            let j = i % half.max(1);
            let freq = (-(10000f64.ln()) * j as f64 / half.max(1) as f64).exp();
            let a = step as f64 * freq;
            out.push(lit(if i < half { a.sin() } else { a.cos() }));
        }
    }
    Tensor::from_vec(&[t.len(), dim], out).unwrap()
}
