//! Toy-scale metrics (Fréchet distance on matcher features, matcher score,
//! retrieval accuracy, held-out denoising loss) and paired-seed sweeps.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{derive_seed, Record};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::guidance::{sample_tokens, GradientMode, GuidanceConfig, InputMode};
use crate::image_io::write_image_grid;
use crate::matcher::{Matcher, MatcherEnsemble};
use crate::scalar::Scalar;
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;

/// Eigenvalues below this are treated as zero in matrix square roots.
pub const EIGEN_FLOOR: f64 = 1e-10;

const SWEEP_STREAM: u64 = 20;
const RETRIEVAL_STREAM: u64 = 21;
const HELDOUT_STREAM: u64 = 22;

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    /// Row-major `d × d`, normalized by `n − 1`.
    pub cov: Vec<f64>,
    pub n: usize,
}

impl FeatureStats {
    /// Two-pass mean and covariance of feature rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::param(format!("feature statistics need at least 2 rows, got {}", rows.len())));
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::param("feature rows differ in length"));
        }
        let n = rows.len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        for r in rows {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            for i in 0..d {
                for j in i..d {
                    cov[i * d + j] += c[i] * c[j];
                }
            }
        }
        for i in 0..d {
            for j in i..d {
                let v = cov[i * d + j] / (n - 1) as f64;
                cov[i * d + j] = v;
                cov[j * d + i] = v;
            }
        }
        Ok(Self { mean, cov, n })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Pooled penultimate-layer activations of the matcher's image encoder.
pub fn extract_features<T: Scalar>(images: &[Tensor<T>], matcher: &Matcher<T>) -> Result<FeatureStats> {
    if images.len() < 2 {
        return Err(Error::param(format!("feature statistics need at least 2 images, got {}", images.len())));
    }
    let rows = images
        .par_iter()
        .map(|img| {
            let f = matcher.image_features(img)?;
            Ok(f.data().iter().map(|v| v.to_f64_lossy()).collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    FeatureStats::from_rows(&rows)
}

fn sqrt_psd(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`, clamped at 0.
///
/// The trace term is evaluated as `tr((Σ_a^{1/2} Σ_b Σ_a^{1/2})^{1/2})`,
/// which has the same eigenvalues and stays symmetric.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    let d = a.dim();
    if b.dim() != d {
        return Err(Error::param(format!("feature dims differ: {d} vs {}", b.dim())));
    }
    let mean: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let sa = DMatrix::from_row_slice(d, d, &a.cov);
    let sb = DMatrix::from_row_slice(d, d, &b.cov);
    let root_a = sqrt_psd(sa.clone());
    let mut inner = &root_a * &sb * &root_a;
    inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|&l| if l > EIGEN_FLOOR { l.sqrt() } else { 0.0 })
        .sum();
    Ok((mean + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Cosine similarity of image and caption embeddings, floored at 0, per pair.
pub fn matcher_scores<T: Scalar>(images: &[Tensor<T>], captions: &[&[u16]], scorer: &Matcher<T>) -> Result<Vec<f64>> {
    if images.is_empty() || images.len() != captions.len() {
        return Err(Error::param(format!(
            "need equal non-empty image and caption lists, got {} and {}",
            images.len(),
            captions.len()
        )));
    }
    images
        .par_iter()
        .zip(captions.par_iter())
        .map(|(img, cap)| {
            let f = scorer.embed_image(img)?;
            let g = scorer.embed_caption(cap)?;
            let (f, g) = (f.cast::<f64>(), g.cast::<f64>());
            let denom = f.norm() * g.norm();
            let cos = if denom > 0.0 { f.dot(&g) / denom } else { 0.0 };
            Ok(cos.max(0.0))
        })
        .collect()
}

/// Mean of [`matcher_scores`].
pub fn matcher_score_metric<T: Scalar>(images: &[Tensor<T>], captions: &[&[u16]], scorer: &Matcher<T>) -> Result<f64> {
    let s = matcher_scores(images, captions, scorer)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Caption-to-image top-1 accuracy: each caption picks among its own image
/// and `distractors` others whose captions differ.
pub fn retrieval_accuracy<T: Scalar>(matcher: &Matcher<T>, records: &[Record], distractors: usize, seed: u64) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::param("retrieval needs at least one record"));
    }
    let images: Vec<Tensor<T>> = records.iter().map(|r| r.image.cast()).collect();
    let f = images
        .par_iter()
        .map(|x| matcher.embed_image(x))
        .collect::<Result<Vec<_>>>()?;
    let g = records
        .par_iter()
        .map(|r| matcher.embed_caption(&r.caption))
        .collect::<Result<Vec<_>>>()?;
    let score = |i: usize, j: usize| g[i].dot(&f[j]).to_f64_lossy();
    let mut hits = 0;
    for i in 0..records.len() {
        let pool: Vec<usize> = (0..records.len())
            .filter(|&j| records[j].caption != records[i].caption)
            .collect();
        if pool.len() < distractors {
            return Err(Error::param(format!(
                "record {i} has only {} valid distractors, need {distractors}",
                pool.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, RETRIEVAL_STREAM));
        let own = score(i, i);
        if index::sample(&mut rng, pool.len(), distractors)
            .iter()
            .all(|k| score(i, pool[k]) < own)
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

/// Mean per-element noise-prediction error on held-out records, with
/// `t` and `ε` drawn from `seed` so that repeated calls agree.
pub fn denoiser_heldout_mse<T: Scalar>(
    denoiser: &Denoiser<T>,
    records: &[Record],
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::param("held-out set is empty"));
    }
    let errs = records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, HELDOUT_STREAM));
            let t = rand::Rng::random_range(&mut rng, 1..=sched.num_steps());
            let x0 = rec.image.cast::<T>();
            let eps = Tensor::<T>::randn(x0.shape(), &mut rng);
            let xt = sched.q_sample(&x0, t, &eps)?.x;
            let cond = denoiser.encode_text(&rec.caption)?;
            let pred = denoiser.predict_eps(&xt, t, &cond)?;
            let d = pred.cast::<f64>().sub(&eps.cast::<f64>());
            Ok(d.dot(&d) / d.len() as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    GuidanceWeight,
    SkipSteps,
    /// Values are `+`-joined member names, e.g. `a+b`.
    Ensemble,
    GradientMode,
    InputMode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::GuidanceWeight => "guidance_weight",
            SweepAxis::SkipSteps => "skip_steps",
            SweepAxis::Ensemble => "ensemble",
            SweepAxis::GradientMode => "gradient_mode",
            SweepAxis::InputMode => "input_mode",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::param(format!("unknown sweep axis {s:?}")))
    }
}

fn parse_enum<E: serde::de::DeserializeOwned>(s: &str, what: &str) -> Result<E> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| Error::param(format!("invalid {what} {s:?}")))
}

/// Models used by a sweep. `scorer` must not be part of `ensemble`.
pub struct SweepModels<'a> {
    pub denoiser: &'a Denoiser<f32>,
    pub schedule: &'a NoiseSchedule,
    pub ensemble: &'a MatcherEnsemble<f32>,
    pub scorer: &'a Matcher<f32>,
    /// Feature statistics of real images under `scorer`.
    pub reference: &'a FeatureStats,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    /// NaN when fewer than two samples were drawn.
    pub fid: f64,
    pub matcher_score: f64,
    pub n: usize,
    /// Per-sample scores, in (prompt, seed) order; paired across rows.
    pub scores: Vec<f64>,
    pub matcher_evaluations: Vec<usize>,
    pub images: Vec<Tensor<f32>>,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("axis_value,fid,matcher_score,n\n");
        for r in &self.rows {
            writeln!(out, "{},{:.9e},{:.9e},{}", r.value, r.fid, r.matcher_score, r.n).unwrap();
        }
        out
    }

    /// One contact sheet per axis value, `<dir>/<axis>_<value>.png`.
    pub fn write_grids(&self, dir: &Path, columns: usize) -> Result<()> {
        for r in &self.rows {
            let name: String = r
                .value
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
                .collect();
            write_image_grid(&r.images, &dir.join(format!("{}_{name}.png", self.axis.name())), columns)?;
        }
        Ok(())
    }
}

/// Seed of sample `k` overall, shared by every axis value.
pub fn sweep_sample_seed(base_seed: u64, k: usize) -> u64 {
    derive_seed(base_seed, k as u64, SWEEP_STREAM)
}

/// Generates `samples_per_prompt` images per prompt and scores them.
pub fn evaluate_config(
    cfg: &GuidanceConfig,
    ensemble: Option<&MatcherEnsemble<f32>>,
    prompts: &[Vec<u16>],
    samples_per_prompt: usize,
    models: &SweepModels<'_>,
) -> Result<SweepRow> {
    if prompts.is_empty() || samples_per_prompt == 0 {
        return Err(Error::param("sweeps need at least one prompt and one sample"));
    }
    let jobs: Vec<(usize, &Vec<u16>)> = prompts
        .iter()
        .flat_map(|p| std::iter::repeat_n(p, samples_per_prompt))
        .enumerate()
        .collect();
    let out = jobs
        .par_iter()
        .map(|&(k, prompt)| {
            let c = GuidanceConfig {
                seed: sweep_sample_seed(cfg.seed, k),
                ..cfg.clone()
            };
            sample_tokens(prompt, &c, models.schedule, models.denoiser, ensemble)
                .map(|(img, trace)| (img, trace.matcher_evaluations))
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, matcher_evaluations): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    let captions: Vec<&[u16]> = jobs.iter().map(|(_, p)| p.as_slice()).collect();
    let scores = matcher_scores(&images, &captions, models.scorer)?;
    let fid = if images.len() >= 2 {
        frechet_distance(&extract_features(&images, models.scorer)?, models.reference)?
    } else {
        f64::NAN
    };
    Ok(SweepRow {
        value: String::new(),
        fid,
        matcher_score: scores.iter().sum::<f64>() / scores.len() as f64,
        n: images.len(),
        scores,
        matcher_evaluations,
        images,
    })
}

/// Evaluates `base` with one field replaced by each of `values`; every row
/// uses the same per-sample seeds.
pub fn run_sweep(
    axis: SweepAxis,
    values: &[String],
    base: &GuidanceConfig,
    prompts: &[Vec<u16>],
    samples_per_prompt: usize,
    models: &SweepModels<'_>,
) -> Result<SweepResult> {
    if values.is_empty() {
        return Err(Error::param("sweep needs at least one axis value"));
    }
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let v = v.trim();
        let mut cfg = base.clone();
        let mut subset = None;
        match axis {
            SweepAxis::GuidanceWeight => {
                cfg.g = v.parse().map_err(|_| Error::param(format!("invalid guidance weight {v:?}")))?;
            }
            SweepAxis::SkipSteps => {
                cfg.skip_steps = v.parse().map_err(|_| Error::param(format!("invalid skip_steps {v:?}")))?;
            }
            SweepAxis::Ensemble => {
                let names: Vec<&str> = v.split('+').map(str::trim).collect();
                subset = Some(models.ensemble.subset(&names)?);
            }
            SweepAxis::GradientMode => cfg.gradient_mode = parse_enum::<GradientMode>(v, "gradient mode")?,
            SweepAxis::InputMode => cfg.input_mode = parse_enum::<InputMode>(v, "input mode")?,
        }
        cfg.validate()?;
        let ensemble = subset.as_ref().unwrap_or(models.ensemble);
        log::info!("sweep {}={v}", axis.name());
        let mut row = evaluate_config(&cfg, Some(ensemble), prompts, samples_per_prompt, models)?;
        row.value = v.to_string();
        rows.push(row);
    }
    Ok(SweepResult { axis, rows })
}

/// Mean of `b − a` over paired samples and its standard error.
pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::param("paired comparison needs equal lists of at least 2"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}

#[cfg(test)]
mod tests;
