use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{PlannerError, RewardSpec};
use crate::autodiff::Tensor;
use crate::model::Model;
use crate::training::HeadStats;

const MAX_REJECTIONS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    /// Rollouts sampled per iteration.
    pub samples: usize,
    /// Elite count used for the refit.
    pub elites: usize,
    pub iterations: usize,
    /// Planning horizon; `None` plans over the model's full horizon.
    pub horizon: Option<usize>,
    /// `[low, high]` per action dimension.
    pub bounds: Vec<[f64; 2]>,
    /// Per action dimension; `None` uses zero.
    pub initial_mean: Option<Vec<f64>>,
    /// Per action dimension; `None` uses `(range / 2)^2`.
    pub initial_variance: Option<Vec<f64>>,
    pub variance_floor: f64,
    /// Rollouts per model call when scoring in parallel.
    pub chunk_size: usize,
    pub warm_start: bool,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            samples: 2048,
            elites: 64,
            iterations: 2,
            horizon: None,
            bounds: vec![[-1.0, 1.0]],
            initial_mean: None,
            initial_variance: None,
            variance_floor: 1e-3,
            chunk_size: 64,
            warm_start: true,
        }
    }
}

impl PlanConfig {
    pub fn action_dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: String| Err(PlannerError::Config(m));
        if self.samples == 0 {
            return bad("samples must be at least 1".into());
        }
        if self.elites == 0 || self.elites > self.samples {
            return bad(format!("elites must be in 1..={}, got {}", self.samples, self.elites));
        }
        if self.iterations == 0 {
            return bad("iterations must be at least 1".into());
        }
        if self.horizon == Some(0) {
            return bad("horizon must be at least 1".into());
        }
        if self.bounds.is_empty() {
            return bad("bounds must cover at least one action dimension".into());
        }
        if let Some(b) = self.bounds.iter().find(|b| !(b[0] < b[1]) || !b[0].is_finite() || !b[1].is_finite()) {
            return bad(format!("bounds {b:?} are not an increasing finite interval"));
        }
        if !(self.variance_floor > 0.0) {
            return bad(format!("variance_floor must be positive, got {}", self.variance_floor));
        }
        if self.chunk_size == 0 {
            return bad("chunk_size must be at least 1".into());
        }
        let a = self.action_dim();
        if let Some(m) = &self.initial_mean {
            if m.len() != a {
                return bad(format!("initial_mean has {} entries for {a} action dimensions", m.len()));
            }
            if m.iter().zip(&self.bounds).any(|(v, b)| !(b[0] <= *v && *v <= b[1])) {
                return bad(format!("initial_mean {m:?} lies outside the bounds"));
            }
        }
        if let Some(v) = &self.initial_variance {
            if v.len() != a {
                return bad(format!("initial_variance has {} entries for {a} action dimensions", v.len()));
            }
            if v.iter().any(|x| !(*x > 0.0)) {
                return bad(format!("initial_variance {v:?} must be positive"));
            }
        }
        Ok(())
    }
}

/// Independent Gaussian per timestep and action dimension, stored `[H, A]`
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionDistribution {
    pub horizon: usize,
    pub action_dim: usize,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl ActionDistribution {
    pub fn initial(cfg: &PlanConfig, horizon: usize) -> Self {
        let a = cfg.action_dim();
        let mean = cfg.initial_mean.clone().unwrap_or_else(|| vec![0.0; a]);
        let var = cfg.initial_variance.clone().unwrap_or_else(|| {
            cfg.bounds.iter().map(|b| ((b[1] - b[0]) / 2.0).powi(2)).collect()
        });
        let var: Vec<f64> = var.iter().map(|v| v.max(cfg.variance_floor)).collect();
        Self {
            horizon,
            action_dim: a,
            mean: (0..horizon).flat_map(|_| mean.iter().copied()).collect(),
            variance: (0..horizon).flat_map(|_| var.iter().copied()).collect(),
        }
    }

    /// Next timestep's starting point: `solution` shifted one step earlier,
    /// last step repeated, variance reset to the initial one.
    pub fn warm_start(cfg: &PlanConfig, solution: &[f64], horizon: usize) -> Self {
        let mut d = Self::initial(cfg, horizon);
        let a = d.action_dim;
        if solution.len() == horizon * a && horizon > 0 {
            d.mean[..(horizon - 1) * a].copy_from_slice(&solution[a..]);
            d.mean[(horizon - 1) * a..].copy_from_slice(&solution[(horizon - 1) * a..]);
            for (m, b) in d.mean.iter_mut().zip(cfg.bounds.iter().cycle()) {
                *m = m.clamp(b[0], b[1]);
            }
        }
        d
    }

    /// Draws from the Gaussian restricted to `bounds`: rejection first,
    /// clamping once the rejection budget runs out.
    fn sample(&self, bounds: &[[f64; 2]], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.mean.len());
        for (i, (&m, &v)) in self.mean.iter().zip(&self.variance).enumerate() {
            let [lo, hi] = bounds[i % self.action_dim];
            let sd = v.sqrt();
            let mut x = f64::NAN;
            for _ in 0..MAX_REJECTIONS {
                let z: f64 = StandardNormal.sample(rng);
                let cand = m + sd * z;
                if (lo..=hi).contains(&cand) {
                    x = cand;
                    break;
                }
            }
            if x.is_nan() {
                let z: f64 = StandardNormal.sample(rng);
                x = (m + sd * z).clamp(lo, hi);
            }
            out.push(x);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub elite_mean_reward: f64,
    /// Best reward seen up to and including this iteration.
    pub best_reward: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    /// Best rollout seen, `[H, A]` row-major.
    pub actions: Vec<f64>,
    pub best_reward: f64,
    pub iterations: Vec<IterationStats>,
    /// Distribution after the last refit.
    pub distribution: ActionDistribution,
}

impl PlanResult {
    pub fn first_action(&self) -> &[f64] {
        &self.actions[..self.distribution.action_dim]
    }
}

/// Runs CEM from `start`. `score` receives `n` rollouts flattened as
/// `[n, H, A]` and returns their rewards in order.
pub fn cem_optimize<F>(
    cfg: &PlanConfig,
    start: ActionDistribution,
    seed: u64,
    mut score: F,
) -> Result<PlanResult, PlannerError>
where
    F: FnMut(&[f64], usize) -> Result<Vec<f64>, PlannerError>,
{
    cfg.validate()?;
    if start.action_dim != cfg.action_dim() || start.mean.len() != start.horizon * start.action_dim {
        return Err(PlannerError::Config("start distribution does not match the action bounds".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = start.mean.len();
    let mut dist = start;
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut stats = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let mut flat = Vec::with_capacity(cfg.samples * len);
        for _ in 0..cfg.samples {
            flat.extend(dist.sample(&cfg.bounds, &mut rng));
        }
        let rewards = score(&flat, cfg.samples)?;
        if rewards.len() != cfg.samples {
            return Err(PlannerError::Config(format!(
                "scorer returned {} rewards for {} rollouts",
                rewards.len(),
                cfg.samples
            )));
        }
        // NaN rewards rank below everything
        let key = |r: f64| if r.is_nan() { f64::NEG_INFINITY } else { r };
        let mut order: Vec<usize> = (0..cfg.samples).collect();
        order.sort_by(|&a, &b| key(rewards[b]).total_cmp(&key(rewards[a])).then(a.cmp(&b)));
        let elites = &order[..cfg.elites];

        let top = order[0];
        if best.as_ref().map_or(true, |(r, _)| key(rewards[top]) > *r) {
            best = Some((key(rewards[top]), flat[top * len..(top + 1) * len].to_vec()));
        }

        let k = elites.len() as f64;
        let mut mean = vec![0.0; len];
        for &e in elites {
            for (m, x) in mean.iter_mut().zip(&flat[e * len..(e + 1) * len]) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= k);
        let mut var = vec![0.0; len];
        for &e in elites {
            for ((v, x), m) in var.iter_mut().zip(&flat[e * len..(e + 1) * len]).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / k).max(cfg.variance_floor));
        dist.mean = mean;
        dist.variance = var;

        let elite_mean = elites.iter().map(|&e| key(rewards[e])).sum::<f64>() / k;
        stats.push(IterationStats {
            iteration,
            elite_mean_reward: elite_mean,
            best_reward: best.as_ref().map(|b| b.0).unwrap_or(f64::NEG_INFINITY),
        });
    }

    let (best_reward, actions) = best.expect("at least one iteration ran");
    Ok(PlanResult { actions, best_reward, iterations: stats, distribution: dist })
}

/// Plans from one observation `[1, C, H, W]`. The image is encoded once and
/// every rollout reuses the encoding. Rollouts are scored in parallel chunks
/// whose results are gathered in sample order, so the thread count does not
/// change the result.
pub fn cem_plan(
    model: &Model,
    stats: &[HeadStats],
    image: &Tensor,
    cfg: &PlanConfig,
    reward: &RewardSpec,
    start: Option<ActionDistribution>,
    seed: u64,
) -> Result<PlanResult, PlannerError> {
    cfg.validate()?;
    let mc = model.config();
    let bound = reward.bind(&mc.heads, stats)?;
    if cfg.action_dim() != mc.action_dim {
        return Err(PlannerError::Config(format!(
            "planner has {} action dimensions, model expects {}",
            cfg.action_dim(),
            mc.action_dim
        )));
    }
    let horizon = cfg.horizon.unwrap_or(mc.horizon);
    if horizon > mc.horizon {
        return Err(PlannerError::Config(format!("plan horizon {horizon} exceeds model horizon {}", mc.horizon)));
    }
    let start = start.unwrap_or_else(|| ActionDistribution::initial(cfg, horizon));
    if start.horizon != horizon {
        return Err(PlannerError::Config(format!(
            "start distribution covers {} steps, plan horizon is {horizon}",
            start.horizon
        )));
    }
    let enc = model.encode(image)?;
    let a = mc.action_dim;
    let model_h = mc.horizon;

    cem_optimize(cfg, start, seed, |flat, n| {
        let per = horizon * a;
        let chunks: Vec<(usize, usize)> =
            (0..n).step_by(cfg.chunk_size).map(|s| (s, (s + cfg.chunk_size).min(n))).collect();
        let scored: Result<Vec<Vec<f64>>, PlannerError> = chunks
            .par_iter()
            .map(|&(s, e)| {
                // steps past the plan horizon cannot affect earlier
                // predictions, so they are padded with zeros
                let mut data = vec![0.0; (e - s) * model_h * a];
                for r in s..e {
                    let dst = (r - s) * model_h * a;
                    data[dst..dst + per].copy_from_slice(&flat[r * per..(r + 1) * per]);
                }
                let actions = Tensor::new(vec![e - s, model_h, a], data).map_err(crate::model::ModelError::from)?;
                let out = model.predict_rollouts(&enc, &actions)?;
                Ok(bound.score(&out, horizon))
            })
            .collect();
        Ok(scored?.concat())
    })
}
