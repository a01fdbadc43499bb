//! Classifier-free guidance combined with image-text matching guidance, and
//! the DDIM sampling loop that applies it.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::corpus::Vocabulary;
use crate::denoiser::{CondVars, Denoiser, TextEmbedding};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, MatcherEnsemble};
use crate::scalar::{lit, Scalar};
use crate::schedule::{make_ddim_timesteps, NoiseSchedule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    BinarySkip,
    LinearRamp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    /// Differentiate through the denoiser's dependence of `x̂_0` on `x_t`.
    Full,
    /// Treat `x̂_0` as a constant.
    Detached,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// The matcher sees the extrapolated `x_in`.
    Modified,
    /// The matcher sees `x_t` directly.
    Noisy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScale {
    /// Each member's `f·g` divided by its temperature, as in its training logits.
    Logit,
    /// Plain `f·g`.
    Dot,
}

impl ScoreScale {
    fn factor<T: Scalar>(self, m: &Matcher<T>) -> f64 {
        match self {
            ScoreScale::Logit => 1.0 / m.temperature(),
            ScoreScale::Dot => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub s: f64,
    pub g: f64,
    pub ddim_steps: usize,
    pub skip_steps: usize,
    pub schedule_kind: ScheduleKind,
    pub eta: f64,
    pub gradient_mode: GradientMode,
    pub input_mode: InputMode,
    pub score_scale: ScoreScale,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            s: 8.0,
            g: 10.0,
            ddim_steps: 50,
            skip_steps: 10,
            schedule_kind: ScheduleKind::BinarySkip,
            eta: 0.0,
            gradient_mode: GradientMode::Full,
            input_mode: InputMode::Modified,
            score_scale: ScoreScale::Logit,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s >= 1.0 && self.s.is_finite()) {
            return Err(Error::param(format!("guidance scale s must be >= 1, got {}", self.s)));
        }
        if !(self.g >= 0.0 && self.g.is_finite()) {
            return Err(Error::param(format!("matcher weight g must be >= 0, got {}", self.g)));
        }
        if self.ddim_steps == 0 {
            return Err(Error::param("ddim_steps must be positive"));
        }
        if self.skip_steps > self.ddim_steps {
            return Err(Error::param(format!(
                "skip_steps {} exceeds ddim_steps {}",
                self.skip_steps, self.ddim_steps
            )));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::param(format!("eta must be >= 0, got {}", self.eta)));
        }
        Ok(())
    }

    /// Whether any step can call the matchers.
    pub fn uses_matchers(&self) -> bool {
        self.g > 0.0 && self.skip_steps < self.ddim_steps
    }
}

/// `ε_∅ + s·(ε_c − ε_∅)`; exactly `ε_c` when `s = 1`.
pub fn classifier_free_eps<T: Scalar>(eps_cond: &Tensor<T>, eps_uncond: &Tensor<T>, s: f64) -> Result<Tensor<T>> {
    eps_cond.same_shape(eps_uncond)?;
    if !(s >= 1.0) {
        return Err(Error::param(format!("guidance scale s must be >= 1, got {s}")));
    }
    if s == 1.0 {
        return Ok(eps_cond.clone());
    }
    let k = lit::<T>(s);
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + k * (c - u)))
}

/// `x_in = √(1−ᾱ_t)·x̂_0 + (1 − √(1−ᾱ_t))·x_t`.
pub fn matcher_input<T: Scalar>(x_t: &Tensor<T>, x0_hat: &Tensor<T>, t: usize, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    if t == 0 || t > sched.num_steps() {
        return Err(Error::param(format!("timestep {t} outside 1..={}", sched.num_steps())));
    }
    matcher_input_with(x_t, x0_hat, (1.0 - sched.alpha_bar(t)?).sqrt())
}

/// `matcher_input` for a given `√(1−ᾱ)`, including the limits 0 and 1.
pub fn matcher_input_with<T: Scalar>(x_t: &Tensor<T>, x0_hat: &Tensor<T>, sqrt_one_minus_ab: f64) -> Result<Tensor<T>> {
    x_t.same_shape(x0_hat)?;
    let a = lit::<T>(sqrt_one_minus_ab);
    let b = lit::<T>(1.0 - sqrt_one_minus_ab);
    Ok(x0_hat.zip_map(x_t, |x0, xt| a * x0 + b * xt))
}

/// Step-wise matcher weight: `(active, multiplier)`.
///
/// `binary_skip` is off before `skip_steps` and 1 afterwards. `linear_ramp`
/// is off before `skip_steps`, then rises as `(i − skip + 1)/(steps − skip)`
/// to reach 1 at the final step.
pub fn guidance_active(step_index: usize, cfg: &GuidanceConfig) -> Result<(bool, f64)> {
    if step_index >= cfg.ddim_steps {
        return Err(Error::param(format!(
            "step index {step_index} outside 0..{}",
            cfg.ddim_steps
        )));
    }
    if step_index < cfg.skip_steps {
        return Ok((false, 0.0));
    }
    let m = match cfg.schedule_kind {
        ScheduleKind::BinarySkip => 1.0,
        ScheduleKind::LinearRamp => {
            (step_index - cfg.skip_steps + 1) as f64 / (cfg.ddim_steps - cfg.skip_steps) as f64
        }
    };
    Ok((true, m))
}

/// The denoiser side of guidance: model, conditions and the classifier-free scale.
pub struct DenoiserContext<'a, T: Scalar> {
    pub denoiser: &'a Denoiser<T>,
    pub cond: &'a TextEmbedding<T>,
    pub null: &'a TextEmbedding<T>,
    pub s: f64,
}

/// Output of one guided evaluation at `x_t`.
#[derive(Clone, Debug)]
pub struct GuidedEps<T> {
    pub eps_cf: Tensor<T>,
    /// Mean over members of the scaled `f(x_in)·g(y)`.
    pub score: Option<f64>,
    /// Its gradient with respect to `x_t`.
    pub gradient: Option<Tensor<T>>,
}

impl<'a, T: Scalar> DenoiserContext<'a, T> {
    fn eps_on<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, t: usize, c: &TextEmbedding<T>) -> Var<'t, T> {
        let p = self.denoiser.params().bind(tape, false);
        let cv = CondVars::from_embeddings(tape, &[c]);
        self.denoiser.forward(&p, x, &[t], &cv)
    }

    /// Classifier-free ε at `x_t`, plus the ensemble score and gradient of the
    /// matcher input when `ensemble` is given.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        x_t: &Tensor<T>,
        t: usize,
        sched: &NoiseSchedule,
        matchers: Option<(&MatcherEnsemble<T>, &[Tensor<T>])>,
        gradient_mode: GradientMode,
        input_mode: InputMode,
        score_scale: ScoreScale,
    ) -> Result<GuidedEps<T>> {
        let tape = Tape::new();
        let xv = tape.leaf(x_t.clone());
        let full = matchers.is_some() && gradient_mode == GradientMode::Full && input_mode == InputMode::Modified;
        let x_den = if full { xv } else { tape.constant(x_t.clone()) };
        let ec = self.eps_on(&tape, &x_den, t, self.cond);
        let eu = self.eps_on(&tape, &x_den, t, self.null);
        let eps_cf = classifier_free_eps(&ec.value(), &eu.value(), self.s)?;
        let Some((ensemble, captions)) = matchers else {
            return Ok(GuidedEps {
                eps_cf,
                score: None,
                gradient: None,
            });
        };
        let ab = sched.alpha_bar(t)?;
        let a = (1.0 - ab).sqrt();
        let x_in = match input_mode {
            InputMode::Noisy => xv,
            InputMode::Modified => {
                let x0 = if full {
                    let e = if self.s == 1.0 {
                        ec
                    } else {
                        ec.sub(&eu).scale(self.s).add(&eu)
                    };
                    xv.sub(&e.scale(a)).scale(1.0 / ab.sqrt())
                } else {
                    let (ca, ce) = (lit::<T>(1.0 / ab.sqrt()), lit::<T>(a / ab.sqrt()));
                    tape.constant(x_t.zip_map(&eps_cf, |x, e| ca * x - ce * e))
                };
                x0.scale(a).add(&xv.scale(1.0 - a))
            }
        };
        // Member gradients are taken at x_in and averaged with a running mean,
        // so identical members reproduce a single member bit for bit; one
        // seeded backward pass then carries the mean to x_t.
        let x_in_value = x_in.value();
        let mut score = 0.0;
        let mut mean_grad = Tensor::zeros(x_t.shape());
        for (i, ((_, m), g)) in ensemble.members().iter().zip(captions).enumerate() {
            let mt = Tape::new();
            let p = m.params().bind(&mt, false);
            let xl = mt.leaf((*x_in_value).clone());
            let s = m.score_on(&p, &xl, g).sum_all().scale(score_scale.factor(m));
            let grad = mt.gradients(s).wrt(xl);
            let w = 1.0 / (i + 1) as f64;
            score += (s.item().to_f64_lossy() - score) * w;
            let wt = lit::<T>(w);
            mean_grad = mean_grad.zip_map(&grad, |a, b| a + (b - a) * wt);
        }
        let gradient = tape.gradients_seeded(x_in, mean_grad).wrt(xv);
        Ok(GuidedEps {
            eps_cf,
            score: Some(score),
            gradient: Some(gradient),
        })
    }
}

fn caption_embeddings<T: Scalar>(ensemble: &MatcherEnsemble<T>, caption: &[u16]) -> Result<Vec<Tensor<T>>> {
    ensemble.members().iter().map(|(_, m)| m.embed_captions(&[caption])).collect()
}

/// Mean over members of `∇_{x_t} f(x_in)·g(y)`.
pub fn ensemble_gradient<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    caption: &[u16],
    ensemble: &MatcherEnsemble<T>,
    sched: &NoiseSchedule,
    ctx: &DenoiserContext<'_, T>,
    gradient_mode: GradientMode,
) -> Result<Tensor<T>> {
    ensemble_score_and_gradient(x_t, t, caption, ensemble, sched, ctx, gradient_mode, InputMode::Modified, ScoreScale::Dot)
        .map(|(_, g)| g)
}

/// The mean ensemble score at `x_t` and its gradient.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_score_and_gradient<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    caption: &[u16],
    ensemble: &MatcherEnsemble<T>,
    sched: &NoiseSchedule,
    ctx: &DenoiserContext<'_, T>,
    gradient_mode: GradientMode,
    input_mode: InputMode,
    score_scale: ScoreScale,
) -> Result<(f64, Tensor<T>)> {
    let caps = caption_embeddings(ensemble, caption)?;
    let out = ctx.evaluate(x_t, t, sched, Some((ensemble, &caps)), gradient_mode, input_mode, score_scale)?;
    Ok((out.score.unwrap(), out.gradient.unwrap()))
}

/// `ε'' = ε_cf − g·√(1−ᾱ_t)·∇_{x_t}` (ensemble mean), for an active step.
#[allow(clippy::too_many_arguments)]
pub fn combined_eps<T: Scalar>(
    x_t: &Tensor<T>,
    t: usize,
    cond: &TextEmbedding<T>,
    caption: &[u16],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    denoiser: &Denoiser<T>,
    ensemble: Option<&MatcherEnsemble<T>>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let null = denoiser.null_condition();
    let ctx = DenoiserContext {
        denoiser,
        cond,
        null: &null,
        s: cfg.s,
    };
    let caps = match (cfg.g > 0.0, ensemble) {
        (false, _) => None,
        (true, Some(e)) => Some((e, caption_embeddings(e, caption)?)),
        (true, None) => return Err(Error::param("g > 0 needs a matcher ensemble")),
    };
    let out = ctx.evaluate(
        x_t,
        t,
        sched,
        caps.as_ref().map(|(e, c)| (*e, c.as_slice())),
        cfg.gradient_mode,
        cfg.input_mode,
        cfg.score_scale,
    )?;
    Ok(apply_correction(out.eps_cf, out.gradient.as_ref(), cfg.g * (1.0 - sched.alpha_bar(t)?).sqrt()).0)
}

/// Subtracts `k·∇` from `ε_cf`, returning the corrected ε and `‖k·∇‖`.
fn apply_correction<T: Scalar>(eps_cf: Tensor<T>, gradient: Option<&Tensor<T>>, k: f64) -> (Tensor<T>, f64) {
    match gradient {
        Some(grad) if k != 0.0 => {
            let mut eps = eps_cf;
            eps.axpy(lit(-k), grad);
            (eps, k.abs() * grad.norm().to_f64_lossy())
        }
        _ => (eps_cf, 0.0),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: usize,
    pub active: bool,
    pub multiplier: f64,
    /// Mean ensemble score of the matcher input; absent when inactive.
    pub score: Option<f64>,
    pub correction_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleTrace<T> {
    pub records: Vec<StepRecord>,
    /// Number of ensemble evaluations (one per active step).
    pub matcher_evaluations: usize,
    pub final_image: Tensor<T>,
}

impl<T: Scalar> SampleTrace<T> {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,t,active,multiplier,score,correction_norm\n");
        for r in &self.records {
            let score = r.score.map(|s| format!("{s:.9e}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{:.9e}",
                r.step, r.t, r.active as u8, r.multiplier, score, r.correction_norm
            )
            .unwrap();
        }
        out
    }
}

/// Runs the guided DDIM sampler from `x_T ~ N(0, I)` drawn with `cfg.seed`.
pub fn sample_tokens<T: Scalar>(
    caption: &[u16],
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    denoiser: &Denoiser<T>,
    ensemble: Option<&MatcherEnsemble<T>>,
) -> Result<(Tensor<T>, SampleTrace<T>)> {
    cfg.validate()?;
    let dc = denoiser.config();
    if sched.num_steps() != dc.num_timesteps {
        return Err(Error::Compatibility(format!(
            "schedule has {} steps but the denoiser was built for {}",
            sched.num_steps(),
            dc.num_timesteps
        )));
    }
    if denoiser.alpha_bars().is_some_and(|ab| ab != sched.alpha_bars()) {
        return Err(Error::Compatibility("denoiser was trained under a different noise schedule".into()));
    }
    if !denoiser.params().all_finite() {
        return Err(Error::Compatibility("denoiser weights are not finite".into()));
    }
    let ensemble = if cfg.uses_matchers() {
        let e = ensemble.ok_or_else(|| Error::Compatibility("g > 0 requires a matcher ensemble".into()))?;
        if e.resolution() != dc.resolution {
            return Err(Error::Compatibility(format!(
                "matchers expect {}px images, denoiser produces {}px",
                e.resolution(),
                dc.resolution
            )));
        }
        if let Some((id, _)) = e.members().iter().find(|(_, m)| !m.params().all_finite()) {
            return Err(Error::Compatibility(format!("matcher {id} weights are not finite")));
        }
        Some(e)
    } else {
        None
    };
    let cond = denoiser.encode_text(caption)?;
    let null = denoiser.null_condition();
    let ctx = DenoiserContext {
        denoiser,
        cond: &cond,
        null: &null,
        s: cfg.s,
    };
    let caps = ensemble.map(|e| caption_embeddings(e, caption)).transpose()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let r = dc.resolution;
    let mut x = Tensor::<T>::randn(&[1, 3, r, r], &mut rng);
    let steps = make_ddim_timesteps(sched.num_steps(), cfg.ddim_steps)?;
    let mut records = Vec::with_capacity(steps.len());
    let mut evaluations = 0;
    for (i, &t) in steps.iter().enumerate() {
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        let (active, mult) = guidance_active(i, cfg)?;
        let weight = cfg.g * mult;
        let use_matchers = active && weight > 0.0;
        let matchers = match (&ensemble, &caps) {
            (Some(e), Some(c)) if use_matchers => Some((*e, c.as_slice())),
            _ => None,
        };
        if matchers.is_some() {
            evaluations += 1;
        }
        let out = ctx.evaluate(&x, t, sched, matchers, cfg.gradient_mode, cfg.input_mode, cfg.score_scale)?;
        let k = weight * (1.0 - sched.alpha_bar(t)?).sqrt();
        let (eps, correction_norm) = apply_correction(out.eps_cf, out.gradient.as_ref(), k);
        let noise = (cfg.eta > 0.0).then(|| Tensor::<T>::randn(&[1, 3, r, r], &mut rng));
        x = sched.ddim_step(&x, t, t_prev, &eps, cfg.eta, noise.as_ref())?;
        if !x.all_finite() {
            return Err(Error::Divergence {
                step: i as u64,
                detail: format!("sample diverged at t = {t}"),
            });
        }
        records.push(StepRecord {
            step: i,
            t,
            active,
            multiplier: mult,
            score: out.score,
            correction_norm,
        });
    }
    let image = x.clamp(-T::one(), T::one());
    let trace = SampleTrace {
        records,
        matcher_evaluations: evaluations,
        final_image: image.clone(),
    };
    Ok((image, trace))
}

/// [`sample_tokens`] for a caption given as text.
pub fn sample<T: Scalar>(
    prompt: &str,
    vocab: &Vocabulary,
    cfg: &GuidanceConfig,
    sched: &NoiseSchedule,
    denoiser: &Denoiser<T>,
    ensemble: Option<&MatcherEnsemble<T>>,
) -> Result<(Tensor<T>, SampleTrace<T>)> {
    let tokens = vocab.encode(prompt)?;
    sample_tokens(&tokens, cfg, sched, denoiser, ensemble)
}
