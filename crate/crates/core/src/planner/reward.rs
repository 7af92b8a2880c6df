use serde::{Deserialize, Serialize};

use super::PlannerError;
use crate::model::{EventHeadSpec, ForwardOutput, HeadKind};
use crate::training::HeadStats;

/// How a terrain-class distribution is collapsed to a number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerrainValue {
    #[default]
    Expectation,
    Argmax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardSpec {
    /// Penalizes expected roughness, and collisions at the cost of the
    /// roughest class.
    TurbulenceCollision {
        terrain_head: String,
        collision_head: String,
        #[serde(default)]
        terrain_value: TerrainValue,
    },
    /// Progress along a robot-frame goal direction, minus collisions.
    GoalDirected { delta_head: String, collision_head: String, goal: [f64; 2] },
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec::TurbulenceCollision {
            terrain_head: "terrain".into(),
            collision_head: "collision".into(),
            terrain_value: TerrainValue::Expectation,
        }
    }
}

/// `sum_c c * p(c)`; for a two-class head this is the positive-class probability.
pub fn expected_class(probs: &[f64]) -> f64 {
    probs.iter().enumerate().map(|(c, p)| c as f64 * p).sum()
}

fn argmax_class(probs: &[f64]) -> f64 {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    best as f64
}

/// Expected value of one step of a head's output. Discrete heads give one
/// number, continuous heads their de-standardized point prediction.
pub fn expected_event_value(head: &EventHeadSpec, output: &[f64], stats: Option<&HeadStats>) -> Vec<f64> {
    match head.kind {
        HeadKind::Discrete(_) => vec![expected_class(output)],
        HeadKind::Continuous(_) => match stats {
            Some(s) => output.iter().enumerate().map(|(d, &v)| s.destandardize(d, v)).collect(),
            None => output.to_vec(),
        },
    }
}

/// `-sum_i [(1 - coll_i) * terr_i + coll_i * num_classes]`
pub fn reward_turbulence_collision(terrain: &[f64], collision: &[f64], num_classes: usize) -> f64 {
    let penalty = num_classes as f64;
    -terrain.iter().zip(collision).map(|(&t, &c)| (1.0 - c) * t + c * penalty).sum::<f64>()
}

/// `sum_i [(1 - coll_i) * (delta_i . goal) - coll_i]`
pub fn reward_goal_directed(delta: &[[f64; 2]], collision: &[f64], goal: [f64; 2]) -> f64 {
    delta
        .iter()
        .zip(collision)
        .map(|(d, &c)| (1.0 - c) * (d[0] * goal[0] + d[1] * goal[1]) - c)
        .sum()
}

/// Head indices resolved against a model's head list.
#[derive(Clone, Debug)]
pub(crate) enum BoundReward {
    Turbulence { terrain: usize, classes: usize, collision: usize, value: TerrainValue },
    Goal { delta: usize, stats: Option<HeadStats>, collision: usize, goal: [f64; 2] },
}

fn find(heads: &[EventHeadSpec], reward: &'static str, name: &str) -> Result<usize, PlannerError> {
    heads
        .iter()
        .position(|h| h.name == name)
        .ok_or_else(|| PlannerError::MissingHead { reward, head: name.to_string() })
}

fn kind_error(reward: &'static str, head: &str, reason: &str) -> PlannerError {
    PlannerError::HeadKind { reward, head: head.to_string(), reason: reason.to_string() }
}

impl RewardSpec {
    pub fn name(&self) -> &'static str {
        match self {
            RewardSpec::TurbulenceCollision { .. } => "turbulence_collision",
            RewardSpec::GoalDirected { .. } => "goal_directed",
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if let RewardSpec::GoalDirected { goal, .. } = self {
            let norm = goal[0].hypot(goal[1]);
            if (norm - 1.0).abs() > 1e-9 {
                return Err(PlannerError::Config(format!("goal vector must be unit length, has norm {norm}")));
            }
        }
        Ok(())
    }

    pub(crate) fn bind(&self, heads: &[EventHeadSpec], stats: &[HeadStats]) -> Result<BoundReward, PlannerError> {
        self.validate()?;
        let reward = self.name();
        match self {
            RewardSpec::TurbulenceCollision { terrain_head, collision_head, terrain_value } => {
                let terrain = find(heads, reward, terrain_head)?;
                let HeadKind::Discrete(classes) = heads[terrain].kind else {
                    return Err(kind_error(reward, terrain_head, "expected a discrete head"));
                };
                let collision = find(heads, reward, collision_head)?;
                if heads[collision].kind != HeadKind::Discrete(2) {
                    return Err(kind_error(reward, collision_head, "expected a two-class head"));
                }
                Ok(BoundReward::Turbulence { terrain, classes, collision, value: *terrain_value })
            }
            RewardSpec::GoalDirected { delta_head, collision_head, goal } => {
                let delta = find(heads, reward, delta_head)?;
                if heads[delta].kind != HeadKind::Continuous(2) {
                    return Err(kind_error(reward, delta_head, "expected a 2-dimensional continuous head"));
                }
                let collision = find(heads, reward, collision_head)?;
                if heads[collision].kind != HeadKind::Discrete(2) {
                    return Err(kind_error(reward, collision_head, "expected a two-class head"));
                }
                let stats = stats.iter().find(|s| &s.name == delta_head).cloned();
                Ok(BoundReward::Goal { delta, stats, collision, goal: *goal })
            }
        }
    }
}

impl BoundReward {
    /// Rewards of every rollout in `out`, counting the first `steps` steps.
    pub(crate) fn score(&self, out: &ForwardOutput, steps: usize) -> Vec<f64> {
        let events = |k: usize| {
            let t = &out.events[k];
            let s = t.shape();
            (t.data(), s[0], s[1], s[2])
        };
        match self {
            BoundReward::Turbulence { terrain, classes, collision, value } => {
                let (terr, n, h, w) = events(*terrain);
                let (coll, ..) = events(*collision);
                (0..n)
                    .map(|r| {
                        let mut t = Vec::with_capacity(steps);
                        let mut c = Vec::with_capacity(steps);
                        for i in 0..steps {
                            let probs = &terr[(r * h + i) * w..(r * h + i + 1) * w];
                            t.push(match value {
                                TerrainValue::Expectation => expected_class(probs),
                                TerrainValue::Argmax => argmax_class(probs),
                            });
                            c.push(coll[(r * h + i) * 2 + 1]);
                        }
                        reward_turbulence_collision(&t, &c, *classes)
                    })
                    .collect()
            }
            BoundReward::Goal { delta, stats, collision, goal } => {
                let (dpos, n, h, _) = events(*delta);
                let (coll, ..) = events(*collision);
                (0..n)
                    .map(|r| {
                        let mut d = Vec::with_capacity(steps);
                        let mut c = Vec::with_capacity(steps);
                        for i in 0..steps {
                            let raw = &dpos[(r * h + i) * 2..(r * h + i + 1) * 2];
                            let v = match stats {
                                Some(s) => [s.destandardize(0, raw[0]), s.destandardize(1, raw[1])],
                                None => [raw[0], raw[1]],
                            };
                            d.push(v);
                            c.push(coll[(r * h + i) * 2 + 1]);
                        }
                        reward_goal_directed(&d, &c, *goal)
                    })
                    .collect()
            }
        }
    }
}
