use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use upaint::trainer::TrainConfig;
use upaint::{DenoiserConfig, Error, GuidanceConfig, MatcherConfig, Result, ScheduleConfig};

/// Everything a subcommand needs. Every section and key is optional in the
/// file; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of whichever stage a command runs.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub matcher: MatcherConfig,
    pub train_denoiser: TrainConfig,
    pub train_matcher: TrainConfig,
    pub guidance: GuidanceConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            matcher: MatcherConfig::default(),
            train_denoiser: TrainConfig {
                steps: 3000,
                ..TrainConfig::default()
            },
            train_matcher: TrainConfig {
                batch_size: 64,
                steps: 400,
                ..TrainConfig::default()
            },
            guidance: GuidanceConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub denoiser: PathBuf,
    /// Guidance ensemble; member names are the file stems.
    pub matchers: Vec<PathBuf>,
    /// Held-out matcher used only for scoring.
    pub scorer: PathBuf,
    pub output: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data.upds".into(),
            denoiser: "denoiser.upck".into(),
            matchers: vec!["matcher_a.upck".into(), "matcher_b.upck".into()],
            scorer: "scorer.upck".into(),
            output: "out".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_simple: usize,
    pub n_complex: usize,
    pub resolution: usize,
    /// Trailing records kept out of training for evaluation.
    pub heldout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_simple: 5000,
            n_complex: 5000,
            resolution: 32,
            heldout: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Distinct held-out captions used as sweep prompts.
    pub prompts: usize,
    pub samples_per_prompt: usize,
    /// Held-out images in the Fréchet reference set.
    pub reference_images: usize,
    pub grid_columns: usize,
    pub distractors: usize,
    /// Held-out records used for the denoising loss.
    pub mse_records: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 20,
            samples_per_prompt: 16,
            reference_images: 500,
            grid_columns: 8,
            distractors: 16,
            mse_records: 200,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.n_simple + d.n_complex == 0 {
            return Err(config_error("data", "corpus would be empty"));
        }
        if d.heldout >= d.n_simple + d.n_complex {
            return Err(config_error("data.heldout", "must leave at least one training record"));
        }
        if d.resolution != self.denoiser.resolution || d.resolution != self.matcher.resolution {
            return Err(config_error(
                "data.resolution",
                format!(
                    "corpus is {}px but denoiser expects {}px and matcher {}px",
                    d.resolution, self.denoiser.resolution, self.matcher.resolution
                ),
            ));
        }
        let e = &self.eval;
        if e.prompts == 0 || e.samples_per_prompt == 0 || e.grid_columns == 0 {
            return Err(config_error("eval", "prompts, samples_per_prompt and grid_columns must be positive"));
        }
        if e.reference_images < 2 {
            return Err(config_error("eval.reference_images", "need at least 2"));
        }
        let section = |key: &str, r: Result<()>| r.map_err(|e| config_error(key, e.to_string()));
        section("schedule", self.schedule.build().map(drop))?;
        section("denoiser", self.denoiser.validate())?;
        section("matcher", self.matcher.validate())?;
        section("train_denoiser", self.train_denoiser.validate())?;
        section("train_matcher", self.train_matcher.validate())?;
        section("guidance", self.guidance.validate())?;
        if self.denoiser.num_timesteps != self.schedule.num_timesteps {
            return Err(config_error("denoiser.num_timesteps", "must equal schedule.num_timesteps"));
        }
        Ok(())
    }

    /// Sorted-key JSON; two configs are equal iff their canonical forms are.
    pub fn canonical(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }
}

fn config_error(key: &str, detail: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        location: "validation".into(),
        detail: detail.into(),
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    if text.trim().is_empty() {
        return Ok(RunConfig::default());
    }
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        let location = format!("line {} column {}", inner.line(), inner.column());
        let full = inner.to_string();
        let detail = full.strip_suffix(&format!(" at {location}")).unwrap_or(&full).to_string();
        Error::Config {
            key: e.path().to_string(),
            location,
            detail,
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}
