//! Gaussian diffusion arithmetic: noise schedules, forward noising, clean-image
//! prediction, posterior statistics and the ancestral and DDIM reverse steps.
//!
//! Timesteps are 1-based (`1..=T`); `ᾱ_0` is defined as 1 so that the final
//! step and `t_prev = 0` need no special casing. Schedule constants are kept
//! in `f64`; tensors may be any [`Scalar`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Which fixed reverse-step variance the ancestral sampler uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// `β_t`, the upper bound.
    Beta,
    /// `β̃_t`, the posterior variance (lower bound).
    #[default]
    BetaTilde,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
    variance_mode: VarianceMode,
}

/// A noised image together with its timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisySample<T> {
    pub x: Tensor<T>,
    pub t: usize,
}

/// Serializable description of a linear schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub variance_mode: VarianceMode,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            variance_mode: VarianceMode::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(make_linear_schedule(self.num_timesteps, self.beta_start, self.beta_end)?.with_variance_mode(self.variance_mode))
    }
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::param(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::param(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let betas = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    NoiseSchedule::from_betas(betas, VarianceMode::default())
}

/// Uniform-stride, strictly decreasing subsequence of `1..=total` starting at `total`.
pub fn make_ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::param(format!(
            "DDIM step count must be in 1..={total}, got {steps}"
        )));
    }
    let stride = total / steps;
    Ok((0..steps).map(|i| total - i * stride).collect())
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>, variance_mode: VarianceMode) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::param("empty beta schedule"));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let posterior_variances = betas
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * b
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
            variance_mode,
        })
    }

    pub fn with_variance_mode(mut self, mode: VarianceMode) -> Self {
        self.variance_mode = mode;
        self
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn variance_mode(&self) -> VarianceMode {
        self.variance_mode
    }

    fn check_t(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.betas.len() {
            return Err(Error::param(format!(
                "timestep {t} outside 1..={}",
                self.betas.len()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.check_t(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.check_t(t)?])
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        Ok(self.alpha_bars[self.check_t(t)?])
    }

    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        Ok(self.posterior_variances[self.check_t(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn posterior_variances(&self) -> &[f64] {
        &self.posterior_variances
    }

    /// Reverse-step variance selected by the variance mode.
    pub fn reverse_variance(&self, t: usize) -> Result<f64> {
        match self.variance_mode {
            VarianceMode::Beta => self.beta(t),
            VarianceMode::BetaTilde => self.posterior_variance(t),
        }
    }

    /// `x_t = √ᾱ_t·x_0 + √(1−ᾱ_t)·ε`.
    pub fn q_sample<T: Scalar>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<NoisySample<T>> {
        x0.same_shape(eps)?;
        let ab = self.alpha_bar(self.check_t(t)? + 1)?;
        Ok(NoisySample {
            x: closed_form::q_sample(ab, x0, eps),
            t,
        })
    }

    /// `x̂_0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t`.
    pub fn predict_x0<T: Scalar>(&self, x_t: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        x_t.same_shape(eps)?;
        self.check_t(t)?;
        closed_form::predict_x0(self.alpha_bar(t)?, x_t, eps)
    }

    /// Mean and variance of `q(x_{t−1} | x_t, x_0)`.
    pub fn posterior_mean_variance<T: Scalar>(
        &self,
        x0: &Tensor<T>,
        x_t: &Tensor<T>,
        t: usize,
    ) -> Result<(Tensor<T>, f64)> {
        x0.same_shape(x_t)?;
        let (c0, ct) = self.posterior_coefficients(t)?;
        let (c0, ct) = (lit::<T>(c0), lit::<T>(ct));
        let mean = x0.zip_map(x_t, |a, b| c0 * a + ct * b);
        Ok((mean, self.posterior_variance(t)?))
    }

    /// The `(x_0, x_t)` coefficients of the posterior mean.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let i = self.check_t(t)?;
        let ab = self.alpha_bars[i];
        let ab_prev = self.alpha_bar(t - 1)?;
        let c0 = ab_prev.sqrt() * self.betas[i] / (1.0 - ab);
        let ct = self.alphas[i].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        Ok((c0, ct))
    }

    /// Reverse-step mean from a noise prediction, and the fixed variance.
    pub fn mu_sigma_from_eps<T: Scalar>(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
    ) -> Result<(Tensor<T>, f64)> {
        x_t.same_shape(eps)?;
        let i = self.check_t(t)?;
        let mean = closed_form::mean_from_eps(self.alphas[i], self.alpha_bars[i], x_t, eps);
        Ok((mean, self.reverse_variance(t)?))
    }

    /// One ancestral step `x_t → x_{t−1}`; no noise is added at `t = 1`.
    pub fn ddpm_step<T: Scalar>(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        eps: &Tensor<T>,
        noise: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        x_t.same_shape(noise)?;
        let (mean, var) = self.mu_sigma_from_eps(x_t, t, eps)?;
        if t == 1 {
            return Ok(mean);
        }
        let sd = lit::<T>(var.sqrt());
        Ok(mean.zip_map(noise, |m, z| m + sd * z))
    }

    /// One DDIM step `x_t → x_{t_prev}`. With `eta = 0` the update is
    /// deterministic and `noise` is ignored.
    pub fn ddim_step<T: Scalar>(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        t_prev: usize,
        eps: &Tensor<T>,
        eta: f64,
        noise: Option<&Tensor<T>>,
    ) -> Result<Tensor<T>> {
        if t_prev >= t {
            return Err(Error::param(format!("t_prev {t_prev} must be below t {t}")));
        }
        if eta < 0.0 {
            return Err(Error::param(format!("eta must be non-negative, got {eta}")));
        }
        x_t.same_shape(eps)?;
        let ab = self.alpha_bar(self.check_t(t)? + 1)?;
        let ab_prev = self.alpha_bar(t_prev)?;
        let x0 = closed_form::predict_x0(ab, x_t, eps)?;
        let sigma = eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).sqrt();
        let c_x0 = lit::<T>(ab_prev.sqrt());
        let c_eps = lit::<T>((1.0 - ab_prev - sigma * sigma).max(0.0).sqrt());
        let mut out = x0.zip_map(eps, |a, e| c_x0 * a + c_eps * e);
        if sigma > 0.0 {
            let noise = noise.ok_or_else(|| Error::param("eta > 0 requires a noise tensor"))?;
            out.same_shape(noise)?;
            out.axpy(lit(sigma), noise);
        }
        Ok(out)
    }
}

/// The same formulas parameterized directly by schedule values, including
/// limits (`ᾱ = 1`, `ᾱ = 0`) that no valid schedule reaches.
pub mod closed_form {
    use super::*;

    pub fn q_sample<T: Scalar>(alpha_bar: f64, x0: &Tensor<T>, eps: &Tensor<T>) -> Tensor<T> {
        let a = lit::<T>(alpha_bar.sqrt());
        let s = lit::<T>((1.0 - alpha_bar).sqrt());
        x0.zip_map(eps, |x, e| a * x + s * e)
    }

    pub fn predict_x0<T: Scalar>(alpha_bar: f64, x_t: &Tensor<T>, eps: &Tensor<T>) -> Result<Tensor<T>> {
        if alpha_bar <= 0.0 {
            return Err(Error::Singularity(format!(
                "cannot predict x0 at alpha_bar = {alpha_bar}"
            )));
        }
        let inv = lit::<T>(1.0 / alpha_bar.sqrt());
        let s = lit::<T>((1.0 - alpha_bar).sqrt());
        Ok(x_t.zip_map(eps, |x, e| (x - s * e) * inv))
    }

    pub fn mean_from_eps<T: Scalar>(alpha: f64, alpha_bar: f64, x_t: &Tensor<T>, eps: &Tensor<T>) -> Tensor<T> {
        let inv = lit::<T>(1.0 / alpha.sqrt());
        let k = if alpha_bar < 1.0 {
            (1.0 - alpha) / (1.0 - alpha_bar).sqrt()
        } else {
            0.0
        };
        let k = lit::<T>(k);
        x_t.zip_map(eps, |x, e| (x - k * e) * inv)
    }
}
