//! Training loops for the denoiser (noise regression with condition dropout)
//! and the matcher (symmetric contrastive loss), with exact resume.

mod checkpoint;
mod optim;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autograd::Tape;
use crate::corpus::{derive_seed, Dataset, Record};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::matcher::{Matcher, MatcherConfig};
use crate::nn::Params;
use crate::scalar::Scalar;
use crate::schedule::{NoiseSchedule, ScheduleConfig};
use crate::tensor::Tensor;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ModelKind, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig, OptimizerKind};

pub const DENOISER_LR: f64 = 1e-3;
pub const MATCHER_LR: f64 = 1e-3;

/// Bounds on the matcher's learned log-temperature.
const LOG_TEMPERATURE_RANGE: (f64, f64) = (-4.605_170_185_988_091, 0.0);

const INIT_STREAM: u64 = 10;
const NOISE_STREAM: u64 = 11;
const BATCH_STREAM: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Defaults to 1e-3 for both model kinds.
    pub learning_rate: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub steps: u64,
    pub cond_dropout: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub grad_clip: f64,
    pub eval_interval: u64,
    /// Emit a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: None,
            optimizer: OptimizerConfig::default(),
            steps: 1000,
            cond_dropout: 0.1,
            grad_clip: 1.0,
            eval_interval: 100,
            checkpoint_interval: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::param(format!(
                "condition dropout must lie in [0, 1], got {}",
                self.cond_dropout
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        if let Some(lr) = self.learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::param(format!("learning rate must be positive, got {lr}")));
            }
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::param("grad_clip must be non-negative"));
        }
        self.optimizer.validate()
    }

    pub fn lr(&self, kind: ModelKind) -> f64 {
        self.learning_rate.unwrap_or(match kind {
            ModelKind::Denoiser => DENOISER_LR,
            ModelKind::Matcher => MATCHER_LR,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Items whose condition was replaced by the null condition.
    pub dropped: usize,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

fn stack_images<T: Scalar>(batch: &[&Record]) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = batch.iter().map(|r| r.image.cast()).collect();
    Tensor::stack(&items)
}

fn apply_update<T: Scalar>(
    params: &mut Params<T>,
    opt: &mut Optimizer<T>,
    mut grads: Vec<Tensor<T>>,
    loss: f64,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<f64> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            step: opt.steps(),
            detail: format!("loss is {loss}"),
        });
    }
    let norm = clip_global_norm(&mut grads, cfg.grad_clip);
    if !norm.is_finite() {
        return Err(Error::Divergence {
            step: opt.steps(),
            detail: format!("gradient norm is {norm}"),
        });
    }
    opt.update(params, &grads, lr)?;
    Ok(norm)
}

/// One denoiser update. Per item, in order: `t ~ U{1..T}`, `ε ~ N(0, I)`,
/// then the condition-dropout coin.
pub fn train_denoiser_step<T: Scalar, R: Rng + ?Sized>(
    denoiser: &mut Denoiser<T>,
    opt: &mut Optimizer<T>,
    batch: &[&Record],
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let x0 = stack_images::<T>(batch)?;
    let per = x0.len() / batch.len();
    let shape = x0.shape()[1..].to_vec();
    let mut ts = Vec::with_capacity(batch.len());
    let mut xt = Vec::with_capacity(x0.len());
    let mut eps = Vec::with_capacity(x0.len());
    let mut drop = Vec::with_capacity(batch.len());
    for chunk in x0.data().chunks(per) {
        let t = rng.random_range(1..=sched.num_steps());
        let e = Tensor::<T>::randn(&shape, rng);
        let item = Tensor::from_vec(&shape, chunk.to_vec())?;
        xt.extend_from_slice(sched.q_sample(&item, t, &e)?.x.data());
        eps.extend_from_slice(e.data());
        ts.push(t);
        drop.push(rng.random::<f64>() < cfg.cond_dropout);
    }
    let xt = Tensor::from_vec(x0.shape(), xt)?;
    let eps = Tensor::from_vec(x0.shape(), eps)?;
    let captions: Vec<&[u16]> = batch.iter().map(|r| r.caption.as_slice()).collect();
    let tokens = denoiser.tokens(&captions)?;

    let tape = Tape::new();
    let p = denoiser.params().bind(&tape, true);
    let c = denoiser.encode_on(&p, &tokens, &drop);
    let x = tape.constant(xt);
    let out = denoiser.forward(&p, &x, &ts, &c);
    let diff = out.sub(&tape.constant(eps));
    let loss_var = diff.mul(&diff).mean_all();
    let loss = loss_var.item().to_f64_lossy();
    let mut g = tape.gradients(loss_var);
    let grads: Vec<Tensor<T>> = p.vars().iter().map(|&v| g.take(v)).collect();
    let norm = apply_update(denoiser.params_mut(), opt, grads, loss, cfg, cfg.lr(ModelKind::Denoiser))?;
    Ok(StepStats {
        loss,
        dropped: drop.iter().filter(|&&d| d).count(),
        grad_norm: norm,
    })
}

/// One contrastive matcher update on aligned image/caption pairs.
pub fn train_matcher_step<T: Scalar>(
    matcher: &mut Matcher<T>,
    opt: &mut Optimizer<T>,
    batch: &[&Record],
    cfg: &TrainConfig,
) -> Result<StepStats> {
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    let x = stack_images::<T>(batch)?;
    let captions: Vec<&[u16]> = batch.iter().map(|r| r.caption.as_slice()).collect();
    let tokens = matcher.tokens(&captions)?;
    let tape = Tape::new();
    let p = matcher.params().bind(&tape, true);
    let loss_var = matcher.contrastive_loss_on(&p, &tape.constant(x), &tokens);
    let loss = loss_var.item().to_f64_lossy();
    let mut g = tape.gradients(loss_var);
    let grads: Vec<Tensor<T>> = p.vars().iter().map(|&v| g.take(v)).collect();
    let norm = apply_update(matcher.params_mut(), opt, grads, loss, cfg, cfg.lr(ModelKind::Matcher))?;
    let id = matcher.log_temperature_id();
    let (lo, hi) = LOG_TEMPERATURE_RANGE;
    let (lo, hi) = (T::from_f64_lossy(lo), T::from_f64_lossy(hi));
    for v in matcher.params_mut().get_mut(id).data_mut() {
        *v = v.max(lo).min(hi);
    }
    Ok(StepStats {
        loss,
        dropped: 0,
        grad_norm: norm,
    })
}

/// What to train.
#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Denoiser {
        model: DenoiserConfig,
        schedule: ScheduleConfig,
    },
    Matcher(MatcherConfig),
}

impl ModelSpec {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Denoiser { .. } => ModelKind::Denoiser,
            ModelSpec::Matcher(_) => ModelKind::Matcher,
        }
    }

    fn sections(&self) -> serde_json::Value {
        match self {
            ModelSpec::Denoiser { model, schedule } => json!({ "model": model, "schedule": schedule }),
            ModelSpec::Matcher(model) => json!({ "model": model }),
        }
    }
}

/// Canonical JSON (sorted keys, no whitespace) of the model and training configs.
pub fn config_echo(spec: &ModelSpec, cfg: &TrainConfig) -> String {
    let mut v = spec.sections();
    v["train"] = serde_json::to_value(cfg).expect("train config serializes");
    serde_json::to_string(&v).expect("json value serializes")
}

enum Model {
    Denoiser(Denoiser<f32>, NoiseSchedule),
    Matcher(Matcher<f32>),
}

impl Model {
    fn params(&self) -> &Params<f32> {
        match self {
            Model::Denoiser(d, _) => d.params(),
            Model::Matcher(m) => m.params(),
        }
    }

    fn params_mut(&mut self) -> &mut Params<f32> {
        match self {
            Model::Denoiser(d, _) => d.params_mut(),
            Model::Matcher(m) => m.params_mut(),
        }
    }
}

#[derive(Debug)]
pub enum TrainEvent<'a> {
    /// Mean training loss over the steps since the previous report.
    Eval { step: u64, loss: f64 },
    Checkpoint(&'a Checkpoint),
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of every step executed by this call.
    pub losses: Vec<f64>,
    /// Items that received the null condition during this call.
    pub dropped: usize,
}

/// Indices of the batch used at `step`; a pure function of its arguments.
pub fn batch_indices(seed: u64, step: u64, dataset_len: usize, batch_size: usize) -> Result<Vec<usize>> {
    if batch_size > dataset_len {
        return Err(Error::param(format!(
            "batch size {batch_size} exceeds dataset size {dataset_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, step, BATCH_STREAM));
    Ok(index::sample(&mut rng, dataset_len, batch_size).into_vec())
}

/// Trains from scratch, or continues `resume`, until `cfg.steps` updates
/// have been applied in total. Runs in `f32`; continuation is bit-identical
/// to an uninterrupted run.
pub fn run_training(
    dataset: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    observer: &mut dyn FnMut(TrainEvent<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = spec.kind();
    let echo = config_echo(spec, cfg);
    let init_seed = derive_seed(cfg.seed, 0, INIT_STREAM);
    let mut model = match spec {
        ModelSpec::Denoiser { model, schedule } => {
            if schedule.num_timesteps != model.num_timesteps {
                return Err(Error::param(format!(
                    "schedule has {} steps, denoiser expects {}",
                    schedule.num_timesteps, model.num_timesteps
                )));
            }
            let sched = schedule.build()?;
            Model::Denoiser(Denoiser::new(model.clone(), init_seed)?.with_schedule(&sched)?, sched)
        }
        ModelSpec::Matcher(model) => Model::Matcher(Matcher::new(model.clone(), init_seed)?),
    };
    let resolution = match spec {
        ModelSpec::Denoiser { model, .. } => model.resolution,
        ModelSpec::Matcher(model) => model.resolution,
    };
    if dataset.resolution != resolution {
        return Err(Error::Compatibility(format!(
            "dataset is {}px, model expects {resolution}px",
            dataset.resolution
        )));
    }
    let (mut opt, mut rng, mut step) = match resume {
        None => (
            Optimizer::new(cfg.optimizer.clone(), model.params()),
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0, NOISE_STREAM)),
            0,
        ),
        Some(ck) => {
            check_resume(ck, spec, cfg)?;
            model.params_mut().load_from(ck.weights.clone())?;
            let opt = Optimizer::restore(cfg.optimizer.clone(), model.params(), &ck.optimizer, ck.step)?;
            (opt, ck.rng.restore(), ck.step)
        }
    };
    let snapshot = |model: &Model, opt: &Optimizer<f32>, rng: &ChaCha8Rng, step: u64| Checkpoint {
        kind,
        version: CHECKPOINT_VERSION,
        config: echo.clone(),
        weights: model.params().clone(),
        optimizer: opt.state(model.params()),
        step,
        rng: RngState::capture(rng),
    };
    let mut losses = Vec::new();
    let mut dropped = 0;
    let mut window = (0.0, 0u64);
    while step < cfg.steps {
        let idx = batch_indices(cfg.seed, step, dataset.len(), cfg.batch_size)?;
        let batch: Vec<&Record> = idx.iter().map(|&i| &dataset.records[i]).collect();
        let stats = match &mut model {
            Model::Denoiser(d, sched) => train_denoiser_step(d, &mut opt, &batch, sched, cfg, &mut rng),
            Model::Matcher(m) => train_matcher_step(m, &mut opt, &batch, cfg),
        }
        .map_err(|e| match e {
            Error::Divergence { detail, .. } => Error::Divergence { step, detail },
            other => other,
        })?;
        step += 1;
        losses.push(stats.loss);
        dropped += stats.dropped;
        window = (window.0 + stats.loss, window.1 + 1);
        if cfg.eval_interval > 0 && step % cfg.eval_interval == 0 {
            log::info!("step {step}: loss {:.5}", window.0 / window.1 as f64);
            observer(TrainEvent::Eval {
                step,
                loss: window.0 / window.1 as f64,
            })?;
            window = (0.0, 0);
        }
        if cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0 && step < cfg.steps {
            observer(TrainEvent::Checkpoint(&snapshot(&model, &opt, &rng, step)))?;
        }
    }
    let checkpoint = snapshot(&model, &opt, &rng, step);
    observer(TrainEvent::Checkpoint(&checkpoint))?;
    Ok(TrainOutcome {
        checkpoint,
        losses,
        dropped,
    })
}

fn check_resume(ck: &Checkpoint, spec: &ModelSpec, cfg: &TrainConfig) -> Result<()> {
    if ck.kind != spec.kind() {
        return Err(Error::Compatibility(format!(
            "checkpoint holds a {:?} model, asked to train a {:?}",
            ck.kind,
            spec.kind()
        )));
    }
    let saved = ck.config_value().map_err(|e| Error::Compatibility(e.to_string()))?;
    let wanted = spec.sections();
    for key in ["model", "schedule"] {
        if saved.get(key) != wanted.get(key) {
            return Err(Error::Compatibility(format!("checkpoint `{key}` config differs")));
        }
    }
    let train = &saved["train"];
    let same = |k: &str, v: serde_json::Value| train.get(k) == Some(&v);
    if !same("seed", json!(cfg.seed))
        || !same("batch_size", json!(cfg.batch_size))
        || !same("optimizer", serde_json::to_value(&cfg.optimizer).unwrap())
    {
        return Err(Error::Compatibility(
            "checkpoint was trained with a different seed, batch size or optimizer".into(),
        ));
    }
    if ck.step > cfg.steps {
        return Err(Error::Compatibility(format!(
            "checkpoint is at step {}, beyond the requested {}",
            ck.step, cfg.steps
        )));
    }
    Ok(())
}

/// Rebuilds a denoiser and its schedule from a checkpoint.
pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<(Denoiser<f32>, ScheduleConfig)> {
    if ck.kind != ModelKind::Denoiser {
        return Err(Error::Compatibility("checkpoint does not hold a denoiser".into()));
    }
    let model: DenoiserConfig = ck.config_section("model")?;
    let schedule: ScheduleConfig = ck.config_section("schedule")?;
    let denoiser = Denoiser::from_params(model, ck.weights.clone())?.with_schedule(&schedule.build()?)?;
    Ok((denoiser, schedule))
}

pub fn matcher_from_checkpoint(ck: &Checkpoint) -> Result<Matcher<f32>> {
    if ck.kind != ModelKind::Matcher {
        return Err(Error::Compatibility("checkpoint does not hold a matcher".into()));
    }
    let model: MatcherConfig = ck.config_section("model")?;
    Matcher::from_params(model, ck.weights.clone())
}
