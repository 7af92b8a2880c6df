//! Datasets of trajectory samples, the training objective, minibatch
//! training with model selection, and offline evaluation.

mod dataset;
mod loss;
mod trainer;

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::model::ModelError;

pub use dataset::{Dataset, HeadLabels, Split, TrajectorySample};
pub use loss::{compute_loss, label_statistics, BatchTargets, HeadStats, HeadTargets, Loss, LossComponents};
pub use trainer::{
    evaluate, train, write_metrics_csv, CheckpointMeta, EvalReport, HeadMetric, MetricRow, TrainConfig,
    TrainOutcome, TrainedModel,
};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("labels do not match model heads: {0}")]
    Labels(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch} (components {components:?})")]
    NonFinite { epoch: usize, batch: usize, components: LossComponents },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("metrics log: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
