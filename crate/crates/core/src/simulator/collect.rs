use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{render_observation, step_dynamics, RenderConfig, SimError, VehicleParams, VehicleState, WorldSpec};
use crate::model::EventHeadSpec;
use crate::training::{Dataset, HeadLabels, TrajectorySample};

/// Event labels a collected dataset can carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Terrain,
    Collision,
    /// Per-step displacement expressed in the sample's robot frame.
    DeltaPosition,
}

impl EventKind {
    pub fn head(self, num_classes: usize) -> EventHeadSpec {
        match self {
            EventKind::Terrain => EventHeadSpec::discrete("terrain", num_classes),
            EventKind::Collision => EventHeadSpec::discrete("collision", 2),
            EventKind::DeltaPosition => EventHeadSpec::continuous("dpos", 2),
        }
    }
}

/// Ornstein-Uhlenbeck steering noise in units of the steering range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OuSteering {
    /// Mean reversion rate, 1/s.
    pub theta: f64,
    /// Diffusion, steering range per sqrt(s).
    pub sigma: f64,
}

impl Default for OuSteering {
    fn default() -> Self {
        Self { theta: 0.5, sigma: 0.4 }
    }
}

impl OuSteering {
    pub fn stationary_std(&self) -> f64 {
        self.sigma / (2.0 * self.theta).sqrt()
    }

    pub fn initial(&self, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (self.stationary_std() * z).clamp(-1.0, 1.0)
    }

    pub fn next(&self, u: f64, dt: f64, rng: &mut ChaCha8Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        (u - self.theta * u * dt + self.sigma * dt.sqrt() * z).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub samples: usize,
    pub horizon: usize,
    /// Episodes are cut after this many steps.
    pub episode_steps: usize,
    pub steering: OuSteering,
    pub events: Vec<EventKind>,
    /// Minimum distance from obstacle edges at episode start, metres.
    pub start_clearance: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            samples: 6000,
            horizon: 12,
            episode_steps: 60,
            steering: OuSteering::default(),
            events: vec![EventKind::Terrain],
            start_clearance: 2.0,
        }
    }
}

impl CollectConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.samples == 0 || self.horizon == 0 {
            return Err(SimError::Config("samples and horizon must be at least 1".into()));
        }
        if self.episode_steps <= self.horizon {
            return Err(SimError::Config(format!(
                "episode_steps ({}) must exceed the horizon ({})",
                self.episode_steps, self.horizon
            )));
        }
        if self.events.is_empty() {
            return Err(SimError::Config("at least one event kind is required".into()));
        }
        if !(self.steering.theta > 0.0 && self.steering.sigma >= 0.0) {
            return Err(SimError::Config("steering theta must be positive and sigma non-negative".into()));
        }
        Ok(())
    }
}

struct Rollout {
    states: Vec<VehicleState>,
    actions: Vec<f64>,
    collided: Vec<bool>,
}

/// One exploration episode. After a collision the vehicle stays frozen
/// (and labelled as colliding) for `horizon` more steps, then the episode
/// ends; leaving the world ends it immediately.
fn explore(
    world: &WorldSpec,
    vehicle: &VehicleParams,
    cfg: &CollectConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout, SimError> {
    let mut state = random_start(world, cfg.start_clearance + vehicle.radius, rng)?;
    let mut u = cfg.steering.initial(rng);
    let mut out = Rollout { states: vec![state], actions: Vec::new(), collided: vec![false] };
    let mut frozen_for = None;
    for _ in 0..cfg.episode_steps {
        if frozen_for == Some(0) {
            break;
        }
        let step = if frozen_for.is_some() {
            super::StepOutcome { state, collision: true, outside: false }
        } else {
            step_dynamics(world, vehicle, &state, u)
        };
        if step.outside {
            break;
        }
        out.actions.push(u);
        state = step.state;
        out.states.push(state);
        out.collided.push(step.collision);
        frozen_for = match frozen_for {
            Some(n) => Some(n - 1),
            None if step.collision => Some(cfg.horizon),
            None => None,
        };
        u = cfg.steering.next(u, vehicle.dt, rng);
    }
    Ok(out)
}

/// Drives OU-steered exploration episodes and turns every timestep with a
/// full horizon of successors into a sample, until `cfg.samples` exist.
pub fn collect_offpolicy(
    world: &WorldSpec,
    vehicle: &VehicleParams,
    render: &RenderConfig,
    cfg: &CollectConfig,
    seed: u64,
) -> Result<Dataset, SimError> {
    cfg.validate()?;
    vehicle.validate()?;
    let k = render.rig.intrinsics;
    let heads: Vec<EventHeadSpec> = cfg.events.iter().map(|e| e.head(world.num_classes)).collect();
    let mut ds = Dataset::new(cfg.horizon, 1, (3, k.image_h, k.image_w), heads);
    ds.provenance = format!(
        "world seed {} ({:?}{}), collect seed {seed}",
        world.seed,
        world.kind,
        if world.swapped { ", swapped" } else { "" }
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = cfg.horizon;
    // (episode rollout index, start step)
    let mut rollouts = Vec::new();
    let mut index = Vec::with_capacity(cfg.samples);
    let mut episode = 0u32;
    let mut empty_streak = 0;
    while index.len() < cfg.samples {
        let r = explore(world, vehicle, cfg, &mut rng)?;
        let usable = r.actions.len().saturating_sub(h - 1);
        if usable == 0 {
            empty_streak += 1;
            if empty_streak > 1000 {
                return Err(SimError::Config("exploration episodes are too short to fill a horizon".into()));
            }
            continue;
        }
        empty_streak = 0;
        for t in 0..usable {
            if index.len() == cfg.samples {
                break;
            }
            index.push((rollouts.len(), t, episode));
        }
        rollouts.push(r);
        episode += 1;
    }

    let samples: Vec<TrajectorySample> = index
        .par_iter()
        .map(|&(ri, t, episode)| {
            let r = &rollouts[ri];
            let s0 = r.states[t];
            let future = &r.states[t + 1..=t + h];
            let labels = cfg
                .events
                .iter()
                .map(|e| match e {
                    EventKind::Terrain => HeadLabels::Discrete(future.iter().map(|s| world.terrain_at(s.x, s.y)).collect()),
                    EventKind::Collision => {
                        HeadLabels::Discrete(r.collided[t + 1..=t + h].iter().map(|&c| c as usize).collect())
                    }
                    EventKind::DeltaPosition => {
                        let (sn, cs) = s0.heading.sin_cos();
                        let mut d = Vec::with_capacity(2 * h);
                        for i in 0..h {
                            let (a, b) = (r.states[t + i], r.states[t + i + 1]);
                            let (dx, dy) = (b.x - a.x, b.y - a.y);
                            d.push(cs * dx + sn * dy);
                            d.push(-sn * dx + cs * dy);
                        }
                        HeadLabels::Continuous(d)
                    }
                })
                .collect();
            TrajectorySample {
                observation: render_observation(world, &s0, render).data,
                actions: r.actions[t..t + h].to_vec(),
                labels,
                positions: future.iter().map(|s| s0.to_robot(s.x, s.y)).collect(),
                episode,
                timestep: t as u32,
            }
        })
        .collect();
    ds.samples = samples;
    ds.validate()?;
    Ok(ds)
}

/// Start pose for an episode: a free position and a uniform heading.
pub(crate) fn random_start(
    world: &WorldSpec,
    clearance: f64,
    rng: &mut ChaCha8Rng,
) -> Result<VehicleState, SimError> {
    let (x, y) = world.random_free_position(rng, clearance, 1000).ok_or(SimError::NoStart)?;
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    Ok(VehicleState::new(x, y, heading))
}
