// SPDX-License-Identifier: MIT OR Apache-2.0

//! `divts`: synthesize data, train, score and evaluate.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 numeric failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<divts::data::DataError> for Failure {
    fn from(e: divts::data::DataError) -> Self {
        match e {
            divts::data::DataError::InvalidWindow { .. } | divts::data::DataError::EmptySplit { .. } => {
                Failure::Usage(e.to_string())
            }
            divts::data::DataError::NonFiniteInput(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<divts::synthgen::SynthError> for Failure {
    fn from(e: divts::synthgen::SynthError) -> Self {
        match e {
            divts::synthgen::SynthError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            divts::synthgen::SynthError::Data(d) => d.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

fn nn_failure(e: &divts::nn::NnError) -> Failure {
    match e {
        divts::nn::NnError::NonFiniteGradient { .. } => Failure::Numeric(e.to_string()),
        divts::nn::NnError::InvalidArch(_) => Failure::Usage(e.to_string()),
        _ => Failure::Data(e.to_string()),
    }
}

impl From<divts::diversify::TrainError> for Failure {
    fn from(e: divts::diversify::TrainError) -> Self {
        use divts::diversify::TrainError as E;
        match &e {
            E::InvalidConfig(_) => Failure::Usage(e.to_string()),
            E::NonFiniteLoss { .. } => Failure::Numeric(e.to_string()),
            E::Nn(n) => nn_failure(n),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<divts::detect::DetectError> for Failure {
    fn from(e: divts::detect::DetectError) -> Self {
        use divts::detect::DetectError as E;
        match &e {
            E::SingularCovariance { .. } => Failure::Numeric(e.to_string()),
            E::InvalidTemperature(_) | E::InvalidEpsilon(_) | E::InvalidQuantile(_) => Failure::Usage(e.to_string()),
            E::Nn(n) => nn_failure(n),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<divts::diversify::CheckpointError> for Failure {
    fn from(e: divts::diversify::CheckpointError) -> Self {
        Failure::Data(format!("checkpoint: {e}"))
    }
}

impl From<divts::eval::EvalError> for Failure {
    fn from(e: divts::eval::EvalError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "divts", version, about = "Latent-domain training and OOD detection for windowed time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic training and target datasets.
    Synth(SynthArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Score a dataset with a trained run.
    Detect(DetectArgs),
    /// Compute metrics from a scores file.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; receives `train/`, `target/` and `synth_config.json`.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with generator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Planted latent domains.
    #[arg(long)]
    pub domains: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub ood_extra: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub series_length: Option<usize>,
    #[arg(long)]
    pub series_per_pair: Option<usize>,
    #[arg(long)]
    pub target_series_per_class: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub drift: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AlgorithmArg {
    Diversify,
    Erm,
    Dann,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; defaults to `<runs dir>/<algorithm>-k<K>-seed<seed>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "DIVTS_RUNS_DIR", default_value = "runs")]
    pub runs_dir: PathBuf,
    /// JSON experiment config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub algorithm: Option<AlgorithmArg>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Search K over an inclusive range, e.g. `2:10`.
    #[arg(long, value_parser = config::parse_k_grid)]
    pub k_grid: Option<[usize; 2]>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub e2: Option<usize>,
    #[arg(long)]
    pub e3: Option<usize>,
    #[arg(long)]
    pub e4: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epoch_budget: Option<usize>,
    #[arg(long)]
    pub val_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Steps 3 and 4 leave the featurizer untouched.
    #[arg(long)]
    pub freeze_featurizer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScorerArg {
    Mcp,
    Mah,
    Odin,
    All,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset to score.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "all")]
    pub scorer: ScorerArg,
    #[arg(long)]
    pub temp: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Validation ID quantile used as the threshold.
    #[arg(long)]
    pub quantile: Option<f64>,
    /// Fixed threshold instead of the validation quantile.
    #[arg(long, allow_hyphen_values = true)]
    pub threshold: Option<f64>,
    /// Results file; defaults to `<run>/scores.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Scores file written by `detect`.
    #[arg(long)]
    pub scores: PathBuf,
    /// Ground-truth dataset the scores refer to.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory, for latent-domain diagnostics.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Output directory; defaults to the scores file's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report detection metrics with OOD as the positive class.
    #[arg(long)]
    pub ood_positive: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Detect(a) => commands::detect(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
