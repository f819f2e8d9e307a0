//! Experiment plumbing around the delayed-control library: grids of training
//! runs persisted under one root, the cliff risk study, and the CSV tables
//! used for plotting.

pub mod cliff;
pub mod grid;
pub mod stats;
pub mod tables;

use std::path::PathBuf;

use delayed_rl::trainer::TrainError;
use thiserror::Error;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "DELAYED_RL_RUNS";

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Invalid(String),
}

pub(crate) fn io_error(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> BenchError {
    let path = path.into();
    move |source| BenchError::Io { path, source }
}

/// Output root: `explicit` if given, else `$DELAYED_RL_RUNS`, else `runs`.
pub fn output_root(explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os(OUTPUT_ROOT_VAR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}
