use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Tensor;
use crate::model::{EventHeadSpec, Model, ModelConfig, Variant};
use crate::training::HeadStats;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-12
}

#[test]
fn expected_values_of_discrete_heads() {
    let terr = EventHeadSpec::discrete("terrain", 3);
    assert_eq!(expected_event_value(&terr, &[1.0, 0.0, 0.0], None), vec![0.0]);
    let u = 1.0 / 3.0;
    assert!(close(expected_event_value(&terr, &[u, u, u], None)[0], 1.0));
    let coll = EventHeadSpec::discrete("collision", 2);
    assert!(close(expected_event_value(&coll, &[0.3, 0.7], None)[0], 0.7));
}

#[test]
fn continuous_values_are_destandardized() {
    let head = EventHeadSpec::continuous("dpos", 2);
    let stats = HeadStats { name: "dpos".into(), mean: vec![1.0, -1.0], std: vec![2.0, 0.5] };
    assert_eq!(expected_event_value(&head, &[0.5, 2.0], Some(&stats)), vec![2.0, 0.0]);
    assert_eq!(expected_event_value(&head, &[0.5, 2.0], None), vec![0.5, 2.0]);
}

#[test]
fn turbulence_collision_reward_examples() {
    let terr = [0.0, 1.0, 2.0, 0.5];
    assert!(close(reward_turbulence_collision(&terr, &[0.0; 4], 3), -3.5));
    let r = reward_turbulence_collision(&[1.0; 12], &[1.0; 12], 3);
    assert!(close(r, -36.0));
    assert_eq!(reward_turbulence_collision(&[0.0; 12], &[0.0; 12], 3), 0.0);
}

#[test]
fn goal_directed_reward_examples() {
    let g = [0.6, 0.8];
    let aligned = [[0.3, 0.4]; 4];
    assert!(close(reward_goal_directed(&aligned, &[0.0; 4], g), 2.0));
    assert!(close(reward_goal_directed(&aligned, &[1.0; 4], g), -4.0));
    let ortho = [[0.8, -0.6]; 4];
    assert!(close(reward_goal_directed(&ortho, &[0.0; 4], g), 0.0));
}

#[test]
fn goal_must_be_unit_length() {
    let spec = RewardSpec::GoalDirected { delta_head: "dpos".into(), collision_head: "collision".into(), goal: [1.0, 1.0] };
    assert!(matches!(spec.validate(), Err(PlannerError::Config(_))));
}

fn quadratic(target: &[f64]) -> impl Fn(&[f64], usize) -> Result<Vec<f64>, PlannerError> + '_ {
    move |flat, n| {
        let len = target.len();
        Ok((0..n)
            .map(|r| -flat[r * len..(r + 1) * len].iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .collect())
    }
}

fn cfg(samples: usize, iterations: usize) -> PlanConfig {
    PlanConfig { samples, elites: samples / 16, iterations, ..PlanConfig::default() }
}

/// Seeds (out of 20) for which CEM lands within 0.05 of a random interior optimum.
fn quadratic_recovery_hits(horizon: usize) -> usize {
    let c = cfg(512, 5);
    (0..20u64)
        .filter(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let target: Vec<f64> = (0..horizon).map(|_| rng.gen_range(-0.8..0.8)).collect();
            let res = cem_optimize(&c, ActionDistribution::initial(&c, horizon), seed, quadratic(&target)).unwrap();
            res.actions.iter().zip(&target).all(|(a, t)| (a - t).abs() < 0.05)
        })
        .count()
}

#[test]
fn recovers_closed_form_optimum() {
    assert_eq!(quadratic_recovery_hits(6), 20);
}

#[test]
fn best_so_far_is_monotone_and_matches_returned_rollout() {
    let target = [0.3, -0.2, 0.9, 0.0];
    let c = cfg(128, 6);
    let res = cem_optimize(&c, ActionDistribution::initial(&c, 4), 7, quadratic(&target)).unwrap();
    for w in res.iterations.windows(2) {
        assert!(w[1].best_reward >= w[0].best_reward);
    }
    let direct = quadratic(&target)(&res.actions, 1).unwrap()[0];
    assert_eq!(direct, res.best_reward);
    assert_eq!(res.iterations.last().unwrap().best_reward, res.best_reward);
}

#[test]
fn samples_respect_bounds_exactly() {
    let c = PlanConfig {
        samples: 256,
        elites: 16,
        iterations: 4,
        bounds: vec![[-0.2, 0.1], [2.0, 5.0]],
        initial_mean: Some(vec![0.1, 2.0]),
        initial_variance: Some(vec![4.0, 100.0]),
        ..PlanConfig::default()
    };
    let mut seen = 0;
    let res = cem_optimize(&c, ActionDistribution::initial(&c, 3), 1, |flat, n| {
        for (i, x) in flat.iter().enumerate() {
            let [lo, hi] = c.bounds[i % 2];
            assert!(lo <= *x && *x <= hi, "{x} outside [{lo}, {hi}]");
        }
        seen += n;
        // pushes the mean toward the upper corner
        Ok((0..n).map(|r| flat[r * 6..(r + 1) * 6].iter().sum()).collect())
    })
    .unwrap();
    assert_eq!(seen, 256 * 4);
    for (i, m) in res.distribution.mean.iter().enumerate() {
        let [lo, hi] = c.bounds[i % 2];
        assert!(lo <= *m && *m <= hi);
    }
}

#[test]
fn all_elites_refit_is_moment_match() {
    let c = PlanConfig { samples: 50, elites: 50, iterations: 1, ..PlanConfig::default() };
    let mut captured = Vec::new();
    let res = cem_optimize(&c, ActionDistribution::initial(&c, 2), 3, |flat, n| {
        captured = flat.to_vec();
        Ok((0..n).map(|r| flat[r * 2]).collect())
    })
    .unwrap();
    for d in 0..2 {
        let xs: Vec<f64> = captured.iter().skip(d).step_by(2).copied().collect();
        let mean = xs.iter().sum::<f64>() / 50.0;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 50.0;
        assert!((res.distribution.mean[d] - mean).abs() < 1e-12);
        assert!((res.distribution.variance[d] - var.max(c.variance_floor)).abs() < 1e-12);
    }
}

#[test]
fn elite_ties_go_to_lower_index() {
    let c = PlanConfig { samples: 20, elites: 5, iterations: 1, ..PlanConfig::default() };
    let mut captured = Vec::new();
    let res = cem_optimize(&c, ActionDistribution::initial(&c, 1), 9, |flat, n| {
        captured = flat.to_vec();
        Ok(vec![1.0; n])
    })
    .unwrap();
    let mean = captured[..5].iter().sum::<f64>() / 5.0;
    assert!((res.distribution.mean[0] - mean).abs() < 1e-12);
    assert_eq!(res.actions, vec![captured[0]]);
}

#[test]
fn variance_is_floored() {
    let c = PlanConfig { samples: 64, elites: 1, iterations: 2, ..PlanConfig::default() };
    let res = cem_optimize(&c, ActionDistribution::initial(&c, 3), 0, quadratic(&[0.0; 3])).unwrap();
    assert!(res.distribution.variance.iter().all(|&v| v == c.variance_floor));
}

#[test]
fn elite_mean_rarely_decreases() {
    let c = cfg(512, 4);
    let target: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
    let ok = (0..100u64)
        .filter(|&seed| {
            let res = cem_optimize(&c, ActionDistribution::initial(&c, 6), seed, quadratic(&target)).unwrap();
            res.iterations.windows(2).all(|w| w[1].elite_mean_reward >= w[0].elite_mean_reward)
        })
        .count();
    assert!(ok >= 95, "{ok}/100 runs monotone");
}

#[test]
fn warm_start_shifts_solution() {
    let c = PlanConfig::default();
    let d = ActionDistribution::warm_start(&c, &[0.1, 0.2, 0.3, 2.0], 4);
    assert_eq!(d.mean, vec![0.2, 0.3, 1.0, 1.0]);
    assert_eq!(d.variance, vec![1.0; 4]);
}

#[test]
fn rejects_bad_configs() {
    let bad = [
        PlanConfig { elites: 0, ..PlanConfig::default() },
        PlanConfig { elites: 4096, ..PlanConfig::default() },
        PlanConfig { iterations: 0, ..PlanConfig::default() },
        PlanConfig { variance_floor: 0.0, ..PlanConfig::default() },
        PlanConfig { bounds: vec![[1.0, -1.0]], ..PlanConfig::default() },
        PlanConfig { initial_mean: Some(vec![3.0]), ..PlanConfig::default() },
        PlanConfig { horizon: Some(0), ..PlanConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(PlannerError::Config(_))), "{c:?}");
    }
}

fn planning_model(variant: Variant) -> Model {
    let heads = vec![EventHeadSpec::discrete("terrain", 3), EventHeadSpec::discrete("collision", 2)];
    Model::new(ModelConfig { variant, hidden: 16, heads, ..ModelConfig::default() }, 5).unwrap()
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![1, 3, 32, 32], (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn plan_encodes_once_regardless_of_samples() {
    let m = planning_model(Variant::Trajectory);
    for n in [16, 200] {
        m.reset_encode_count();
        let c = PlanConfig { samples: n, elites: 4, iterations: 3, chunk_size: 32, ..PlanConfig::default() };
        cem_plan(&m, &[], &image(1), &c, &RewardSpec::default(), None, 0).unwrap();
        assert_eq!(m.encode_count(), 1);
    }
}

#[test]
fn plan_reward_matches_direct_prediction() {
    let m = planning_model(Variant::SelfAttention);
    let c = PlanConfig { samples: 64, elites: 8, iterations: 2, ..PlanConfig::default() };
    let img = image(2);
    let res = cem_plan(&m, &[], &img, &c, &RewardSpec::default(), None, 4).unwrap();
    let actions = Tensor::new(vec![1, 12, 1], res.actions.clone()).unwrap();
    let out = m.predict(&img, &actions).unwrap();
    let terr: Vec<f64> = out.events[0].data().chunks(3).map(expected_class).collect();
    let coll: Vec<f64> = out.events[1].data().chunks(2).map(|p| p[1]).collect();
    let direct = reward_turbulence_collision(&terr, &coll, 3);
    assert!((direct - res.best_reward).abs() < 1e-12);
}

#[test]
fn plan_is_independent_of_thread_count() {
    let m = planning_model(Variant::Trajectory);
    let c = PlanConfig { samples: 96, elites: 8, iterations: 2, chunk_size: 16, ..PlanConfig::default() };
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| cem_plan(&m, &[], &image(3), &c, &RewardSpec::default(), None, 11).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a, b);
    assert_eq!(a, run(1));
}

#[test]
fn shorter_plan_horizon_scores_prefix() {
    let m = planning_model(Variant::None);
    let c = PlanConfig { samples: 32, elites: 4, iterations: 1, horizon: Some(5), ..PlanConfig::default() };
    let img = image(4);
    let res = cem_plan(&m, &[], &img, &c, &RewardSpec::default(), None, 2).unwrap();
    assert_eq!(res.actions.len(), 5);
    let mut padded = res.actions.clone();
    padded.resize(12, 0.7);
    let out = m.predict(&img, &Tensor::new(vec![1, 12, 1], padded).unwrap()).unwrap();
    let terr: Vec<f64> = out.events[0].data().chunks(3).take(5).map(expected_class).collect();
    let coll: Vec<f64> = out.events[1].data().chunks(2).take(5).map(|p| p[1]).collect();
    assert!((reward_turbulence_collision(&terr, &coll, 3) - res.best_reward).abs() < 1e-12);

    let long = PlanConfig { horizon: Some(13), ..c };
    assert!(matches!(cem_plan(&m, &[], &img, &long, &RewardSpec::default(), None, 2), Err(PlannerError::Config(_))));
}

#[test]
fn missing_head_rejected_before_encoding() {
    let m = Model::new(ModelConfig { hidden: 8, ..ModelConfig::default() }, 1).unwrap();
    m.reset_encode_count();
    let err = cem_plan(&m, &[], &image(0), &PlanConfig::default(), &RewardSpec::default(), None, 0).unwrap_err();
    assert!(matches!(err, PlannerError::MissingHead { ref head, .. } if head == "collision"), "{err}");
    assert_eq!(m.encode_count(), 0);
}
