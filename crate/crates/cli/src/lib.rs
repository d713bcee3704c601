//! Command-line workflow around `differflow`: train a flow on images or
//! precomputed features, score test data, evaluate score files, draw
//! gradient maps, and generate synthetic data.

pub mod commands;
pub mod config;
pub mod synth;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use commands::run;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error(transparent)]
    Core(#[from] differflow::Error),
}

impl CliError {
    /// 3 for a diverged training run, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(differflow::Error::Divergence { .. }) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "differflow", version, about = "Defect detection with normalizing flows")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a flow on an image directory or a feature file.
    Train(commands::TrainArgs),
    /// Score every test sample; writes `id,score,label` lines.
    Score(commands::ScoreArgs),
    /// AUROC, ROC curve and score histogram of a score file.
    Eval(commands::EvalArgs),
    /// Gradient map of one image.
    Localize(commands::LocalizeArgs),
    /// Write a synthetic dataset.
    Synth(commands::SynthArgs),
}

/// Sizes the worker pool from `DIFFERFLOW_THREADS` (unset or 0: one per core).
pub fn init_threads() -> Result<(), CliError> {
    let n = match std::env::var("DIFFERFLOW_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|e| CliError::Usage(format!("DIFFERFLOW_THREADS=`{v}`: {e}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))
}

/// Output path next to `path` with `suffix` appended to the file name.
pub(crate) fn with_suffix(path: &std::path::Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}
