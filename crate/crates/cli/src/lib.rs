//! The `upaint` command line: corpus generation, training, guided sampling,
//! sweeps and evaluation, all driven by one JSON config file.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use upaint::{Error, GradientMode};

pub use commands::execute;
pub use config::{load_config, parse_config, DataConfig, EvalConfig, PathsConfig, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "upaint", version, about = "Text-to-image diffusion with classifier-free and matcher guidance")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// JSON run config; missing keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 guarantees bit-exact reruns.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Default)]
pub struct GuidanceArgs {
    #[arg(long)]
    pub g: Option<f64>,
    #[arg(long)]
    pub s: Option<f64>,
    #[arg(long)]
    pub skip_steps: Option<usize>,
    #[arg(long)]
    pub ddim_steps: Option<usize>,
    #[arg(long, value_parser = parse_gradient_mode)]
    pub gradient_mode: Option<GradientMode>,
}

fn parse_gradient_mode(s: &str) -> Result<GradientMode, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| format!("expected full or detached, got {s:?}"))
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic captioned corpus.
    GenData,
    /// Train the noise predictor.
    TrainDenoiser {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train an image-text matcher.
    TrainMatcher {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw one guided sample; writes a PNG and a per-step trace CSV.
    Sample {
        #[arg(long)]
        prompt: String,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Paired-seed sweep of one guidance setting.
    Sweep {
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
    /// Held-out metrics for the trained models.
    Eval {
        #[command(flatten)]
        guidance: GuidanceArgs,
    },
}

/// One-line JSON description of a failure, for scripts.
pub fn error_line(e: &Error) -> String {
    let kind = match e {
        Error::Parameter(_) => "parameter",
        Error::Shape { .. } => "shape",
        Error::Singularity(_) => "singularity",
        Error::Vocabulary { .. } | Error::UnknownWord(_) => "vocabulary",
        Error::Divergence { .. } => "divergence",
        Error::Compatibility(_) => "compatibility",
        Error::Format { .. } => "format",
        Error::Config { .. } => "config",
        Error::Io { .. } => "io",
    };
    let mut obj = serde_json::json!({ "error": kind, "message": e.to_string() });
    match e {
        Error::Config { key, location, .. } => {
            obj["key"] = key.clone().into();
            obj["location"] = location.clone().into();
        }
        Error::Format { field, .. } => obj["field"] = field.clone().into(),
        Error::Io { path, .. } => obj["path"] = path.display().to_string().into(),
        _ => {}
    }
    obj.to_string()
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status: 0 on success, 1 on failure, 2 on usage errors.
pub fn run_command<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}
