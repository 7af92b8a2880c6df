//! Experiment configuration and the pipelines behind each command:
//! world generation, data collection, training, offline and on-policy
//! evaluation, attention export and the full toy comparison.

mod config;
mod export;
mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

use crate::binio::FormatError;
use crate::model::ModelError;
use crate::planner::PlannerError;
use crate::simulator::SimError;
use crate::training::TrainingError;

pub use config::{EvaluationConfig, ExperimentConfig, WorldSection};
pub use export::{attention_overlays, upsample_bilinear};
pub use pipeline::{
    summarize_episodes, EpisodeRow, Experiment, OfflineRow, OnPolicySummary, ToyReport, ToyRun, ToySummaryRow,
    TOY_DATASETS,
};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "TRAJATTN_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config:\n{}", .0.iter().map(|e| format!("  {e}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<String>),
    #[error("missing input file {}", .0.display())]
    MissingInput(PathBuf),
    #[error("{}: {reason}", path.display())]
    Input { path: PathBuf, reason: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("writing CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sizes the global worker pool from `TRAJATTN_THREADS` when it is set.
/// Returns the thread count in use.
pub fn configure_threads() -> Result<usize, HarnessError> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| HarnessError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        // A pool that already exists keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(rayon::current_num_threads())
}

/// Provenance string stored in every artifact.
pub fn provenance(config_hash: &str, seed: u64) -> String {
    format!("config_hash={config_hash} seed={seed}")
}
