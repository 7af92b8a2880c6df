//! Planar terrain worlds, a kinematic bicycle vehicle, a pinhole ray-cast
//! renderer, off-policy data collection and closed-loop episodes.

mod collect;
mod episode;
mod render;
mod vehicle;
mod world;

use thiserror::Error;

use crate::planner::PlannerError;
use crate::training::TrainingError;
use crate::FormatError;

pub use collect::{collect_offpolicy, CollectConfig, EventKind, OuSteering};
pub use episode::{
    run_episode, sample_starts, EpisodeConfig, EpisodeRecord, PlannerPolicy, Policy, RandomPolicy,
};
pub use render::{ground_hit, render_observation, write_ppm, Image, RenderConfig};
pub use vehicle::{step_dynamics, StepOutcome, VehicleParams, VehicleState};
pub use world::{generate_world, Obstacle, WorldKind, WorldParams, WorldSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid world parameters: {0}")]
    World(String),
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("world has no traversable start position")]
    NoStart,
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
