use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::collect::random_start;
use super::{
    render_observation, step_dynamics, Image, OuSteering, RenderConfig, SimError, VehicleParams, VehicleState,
    WorldSpec,
};
use crate::model::Model;
use crate::planner::{cem_plan, ActionDistribution, PlanConfig, RewardSpec};
use crate::training::HeadStats;

/// Closed-loop steering controller.
pub trait Policy {
    fn name(&self) -> String;
    /// Called before the first step of every episode.
    fn reset(&mut self, seed: u64);
    /// Steering in `[-1, 1]` for the current observation.
    fn act(&mut self, image: &Image, state: &VehicleState, step: usize) -> Result<f64, SimError>;
}

/// The exploration policy: OU steering noise, blind to observations.
pub struct RandomPolicy {
    steering: OuSteering,
    dt: f64,
    rng: ChaCha8Rng,
    u: f64,
}

impl RandomPolicy {
    pub fn new(steering: OuSteering, dt: f64) -> Self {
        Self { steering, dt, rng: ChaCha8Rng::seed_from_u64(0), u: 0.0 }
    }
}

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.u = self.steering.initial(&mut self.rng);
    }

    fn act(&mut self, _: &Image, _: &VehicleState, step: usize) -> Result<f64, SimError> {
        if step > 0 {
            self.u = self.steering.next(self.u, self.dt, &mut self.rng);
        }
        Ok(self.u)
    }
}

/// Replans with CEM every step and executes the first action, warm
/// starting from the previous solution when configured.
pub struct PlannerPolicy<'a> {
    model: &'a Model,
    stats: &'a [HeadStats],
    plan: PlanConfig,
    reward: RewardSpec,
    seed: u64,
    previous: Option<Vec<f64>>,
}

impl<'a> PlannerPolicy<'a> {
    pub fn new(model: &'a Model, stats: &'a [HeadStats], plan: PlanConfig, reward: RewardSpec) -> Self {
        Self { model, stats, plan, reward, seed: 0, previous: None }
    }
}

impl Policy for PlannerPolicy<'_> {
    fn name(&self) -> String {
        self.model.variant().to_string()
    }

    fn reset(&mut self, seed: u64) {
        self.seed = seed;
        self.previous = None;
    }

    fn act(&mut self, image: &Image, _: &VehicleState, step: usize) -> Result<f64, SimError> {
        let horizon = self.plan.horizon.unwrap_or(self.model.config().horizon);
        let start = match (&self.previous, self.plan.warm_start) {
            (Some(prev), true) => Some(ActionDistribution::warm_start(&self.plan, prev, horizon)),
            _ => None,
        };
        let seed = self.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step as u64);
        let res = cem_plan(self.model, self.stats, &image.to_tensor(), &self.plan, &self.reward, start, seed)?;
        let a = res.first_action()[0];
        self.previous = Some(res.actions);
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Control steps per episode.
    pub steps: usize,
    /// Minimum distance from obstacle edges at the start pose, metres.
    pub start_clearance: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self { steps: 180, start_clearance: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub policy: String,
    pub seed: u64,
    /// Sum of per-step terrain scores.
    pub episode_return: f64,
    pub steps: usize,
    pub max_steps: usize,
    /// Fraction of `max_steps` driven before the episode ended.
    pub completion: f64,
    pub collided: bool,
    pub left_world: bool,
    /// Set when the policy failed and the episode was cut short.
    pub aborted: Option<String>,
    /// `(x, y, heading)` from the start pose on.
    pub path: Vec<[f64; 3]>,
}

/// Start poses shared by every policy compared in one evaluation.
pub fn sample_starts(world: &WorldSpec, n: usize, clearance: f64, seed: u64) -> Result<Vec<VehicleState>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_start(world, clearance, &mut rng)).collect()
}

/// Render, act, step until the step budget, a collision, or leaving the
/// world. Each completed step scores the terrain class driven onto.
pub fn run_episode(
    world: &WorldSpec,
    vehicle: &VehicleParams,
    render: &RenderConfig,
    policy: &mut dyn Policy,
    cfg: &EpisodeConfig,
    start: VehicleState,
    seed: u64,
) -> EpisodeRecord {
    policy.reset(seed);
    let mut state = start;
    let mut rec = EpisodeRecord {
        policy: policy.name(),
        seed,
        episode_return: 0.0,
        steps: 0,
        max_steps: cfg.steps,
        completion: 0.0,
        collided: false,
        left_world: false,
        aborted: None,
        path: vec![[state.x, state.y, state.heading]],
    };
    for step in 0..cfg.steps {
        let img = render_observation(world, &state, render);
        let action = match policy.act(&img, &state, step) {
            Ok(a) => a,
            Err(e) => {
                rec.aborted = Some(e.to_string());
                break;
            }
        };
        let out = step_dynamics(world, vehicle, &state, action);
        if out.collision {
            rec.collided = true;
            break;
        }
        if out.outside {
            rec.left_world = true;
            break;
        }
        state = out.state;
        rec.episode_return += world.terrain_score(world.terrain_at(state.x, state.y));
        rec.steps += 1;
        rec.path.push([state.x, state.y, state.heading]);
    }
    rec.completion = if cfg.steps == 0 { 1.0 } else { rec.steps as f64 / cfg.steps as f64 };
    rec
}
