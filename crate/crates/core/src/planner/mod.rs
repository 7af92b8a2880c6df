//! Cross-entropy-method search over action sequences, scored by rewards
//! computed from the network's per-step event predictions.

mod cem;
mod reward;

use thiserror::Error;

use crate::model::ModelError;

pub use cem::{cem_optimize, cem_plan, ActionDistribution, IterationStats, PlanConfig, PlanResult};
pub use reward::{
    expected_class, expected_event_value, reward_goal_directed, reward_turbulence_collision, RewardSpec,
    TerrainValue,
};

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid planner config: {0}")]
    Config(String),
    #[error("reward {reward} needs head {head:?}, which the model does not have")]
    MissingHead { reward: &'static str, head: String },
    #[error("head {head:?} has the wrong kind for {reward}: {reason}")]
    HeadKind { reward: &'static str, head: String, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[cfg(test)]
mod tests;
