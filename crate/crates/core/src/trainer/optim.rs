use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Params;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments with bias correction.
    Adam,
    /// Gradient descent with heavy-ball momentum.
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            momentum: 0.9,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !unit(self.momentum) {
            return Err(Error::param("optimizer betas and momentum must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param("optimizer epsilon must be positive"));
        }
        Ok(())
    }
}

/// Optimizer with per-tensor state aligned to a [`Params`] collection.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    steps: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig, params: &Params<T>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        let v = match config.kind {
            OptimizerKind::Adam => zeros(),
            OptimizerKind::Momentum => Vec::new(),
        };
        Self {
            config,
            steps: 0,
            m: zeros(),
            v,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, params: &mut Params<T>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(Error::param(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        self.steps += 1;
        let c = &self.config;
        match c.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (lit::<T>(c.beta1), lit::<T>(c.beta2));
                let (o1, o2) = (lit::<T>(1.0 - c.beta1), lit::<T>(1.0 - c.beta2));
                let k = self.steps as i32;
                let step = lit::<T>(lr * (1.0 - c.beta2.powi(k)).sqrt() / (1.0 - c.beta1.powi(k)));
                let eps = lit::<T>(c.epsilon);
                for (((p, g), m), v) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    p.same_shape(g)?;
                    for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                        *m = b1 * *m + o1 * g;
                        *v = b2 * *v + o2 * g * g;
                        *w -= step * *m / (v.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Momentum => {
                let mu = lit::<T>(c.momentum);
                let lr = lit::<T>(lr);
                for ((p, g), m) in params.tensors_mut().iter_mut().zip(grads).zip(&mut self.m) {
                    p.same_shape(g)?;
                    for ((w, &g), m) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()) {
                        *m = mu * *m + g;
                        *w -= lr * *m;
                    }
                }
            }
        }
        Ok(())
    }

    /// Moment tensors as named parameters (`m.<name>`, `v.<name>`).
    pub fn state(&self, params: &Params<T>) -> Params<T> {
        let mut out = Params::new();
        for (prefix, moments) in [("m", &self.m), ("v", &self.v)] {
            for (name, t) in params.names().iter().zip(moments) {
                out.push(format!("{prefix}.{name}"), t.clone());
            }
        }
        out
    }

    /// Restores state written by [`Optimizer::state`].
    pub fn restore(config: OptimizerConfig, params: &Params<T>, state: &Params<T>, steps: u64) -> Result<Self> {
        let mut opt = Self::new(config, params);
        let expected = opt.state(params).manifest();
        if state.manifest() != expected {
            return Err(Error::Compatibility(
                "optimizer state does not match the model parameters".into(),
            ));
        }
        let n = params.len();
        let mut ts = state.tensors().iter().cloned();
        opt.m = ts.by_ref().take(n).collect();
        opt.v = ts.collect();
        opt.steps = steps;
        Ok(opt)
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| {
            let v = v.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` to global norm `max_norm` when it is exceeded; returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = lit::<T>(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}
