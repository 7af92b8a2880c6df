use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Adam, AdamConfig, Tape, Tensor};
use crate::model::{EventHeadSpec, Model, ModelConfig, Variant};

fn small_config(variant: Variant, heads: Vec<EventHeadSpec>) -> ModelConfig {
    ModelConfig { variant, hidden: 16, heads, ..ModelConfig::default() }
}

fn synthetic(n: usize, heads: Vec<EventHeadSpec>, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = Dataset::new(12, 1, (3, 32, 32), heads.clone());
    for i in 0..n {
        let labels = heads
            .iter()
            .map(|h| {
                if h.is_discrete() {
                    HeadLabels::Discrete((0..12).map(|_| rng.gen_range(0..h.width())).collect())
                } else {
                    HeadLabels::Continuous((0..12 * h.width()).map(|_| rng.gen_range(-2.0..5.0)).collect())
                }
            })
            .collect();
        ds.samples.push(TrajectorySample {
            observation: (0..3 * 32 * 32).map(|_| rng.gen()).collect(),
            actions: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            labels,
            positions: {
                let curve = rng.gen_range(-0.05..0.05);
                (1..=12).map(|s| [s as f64 * 1.15, curve * (s * s) as f64]).collect()
            },
            episode: (i / 10) as u32,
            timestep: (i % 10) as u32,
        });
    }
    ds.provenance = "test".into();
    ds
}

fn terrain() -> Vec<EventHeadSpec> {
    vec![EventHeadSpec::discrete("terrain", 3)]
}

fn all_heads() -> Vec<EventHeadSpec> {
    vec![
        EventHeadSpec::discrete("terrain", 3),
        EventHeadSpec::discrete("collision", 2),
        EventHeadSpec::continuous("dpos", 2),
    ]
}

/// Loss for hand-built logits on a one-head, one-step configuration.
fn loss_for_logits(logits: Vec<f64>, labels: Vec<usize>, positions: Option<(Vec<f64>, Vec<f64>)>) -> LossComponents {
    let classes = logits.len() / labels.len();
    let variant = if positions.is_some() { Variant::Trajectory } else { Variant::None };
    let config = ModelConfig { horizon: 1, ..small_config(variant, vec![EventHeadSpec::discrete("t", classes)]) };
    let mut tape = Tape::new();
    let b = labels.len();
    let out = tape.param(Tensor::new(vec![b, classes], logits).unwrap());
    let mut vars = crate::model::ForwardVars { outputs: vec![vec![out]], positions: vec![], masks: vec![] };
    let mut targets = BatchTargets { heads: vec![HeadTargets::Discrete(vec![labels])], positions: vec![] };
    if let Some((pred, truth)) = positions {
        vars.positions.push(tape.param(Tensor::new(vec![b, 2], pred).unwrap()));
        targets.positions.push(Tensor::new(vec![b, 2], truth).unwrap());
    }
    compute_loss(&mut tape, &config, &vars, &targets, 1.0).unwrap().components
}

#[test]
fn certain_correct_prediction_has_zero_cross_entropy() {
    let c = loss_for_logits(vec![800.0, 0.0, 0.0, 0.0, 0.0, 800.0], vec![0, 2], None);
    assert_eq!(c.discrete, 0.0);
}

#[test]
fn uniform_prediction_costs_ln_classes() {
    let c = loss_for_logits(vec![0.3; 6], vec![0, 2], None);
    assert!((c.discrete - 3f64.ln()).abs() < 1e-12);
    assert!((3f64.ln() - 1.0986).abs() < 1e-4);
}

#[test]
fn exact_positions_have_zero_attention_loss() {
    let p = vec![1.0, 2.0, 3.5, -0.5];
    let c = loss_for_logits(vec![0.0; 4], vec![0, 1], Some((p.clone(), p)));
    assert_eq!(c.attention, 0.0);
    let c = loss_for_logits(vec![0.0; 4], vec![0, 1], Some((vec![1.0, 2.0, 3.5, -0.5], vec![0.0, 2.0, 3.5, 1.5])));
    // (1 + 4) summed, averaged over a batch of two
    assert!((c.attention - 2.5).abs() < 1e-12);
}

#[test]
fn loss_rejects_mismatched_labels() {
    let config = small_config(Variant::None, terrain());
    let mut tape = Tape::new();
    let out = tape.param(Tensor::zeros(&[2, 3]));
    let vars = crate::model::ForwardVars { outputs: vec![vec![out]], positions: vec![], masks: vec![] };
    let targets = BatchTargets { heads: vec![HeadTargets::Continuous(vec![Tensor::zeros(&[2, 3])])], positions: vec![] };
    assert!(compute_loss(&mut tape, &config, &vars, &targets, 1.0).is_err());
}

#[test]
fn dataset_round_trip_and_format_errors() {
    let ds = synthetic(7, all_heads(), 1);
    ds.validate().unwrap();
    let mut bytes = Vec::new();
    ds.write(&mut bytes).unwrap();
    assert_eq!(&bytes[..6], b"TRAJDS");
    assert_eq!(Dataset::read(bytes.as_slice()).unwrap(), ds);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Dataset::read(bad.as_slice()).is_err());
    assert!(Dataset::read(&bytes[..bytes.len() - 3]).is_err());
    let mut wrong_version = bytes.clone();
    wrong_version[6] = 9;
    assert!(Dataset::read(wrong_version.as_slice()).is_err());
}

#[test]
fn dataset_validation_catches_bad_labels() {
    let mut ds = synthetic(2, terrain(), 1);
    ds.samples[1].labels[0] = HeadLabels::Discrete(vec![3; 12]);
    assert!(ds.validate().is_err());
    let mut ds = synthetic(2, terrain(), 1);
    ds.samples[0].positions[3][0] = f64::NAN;
    assert!(ds.validate().is_err());
}

#[test]
fn split_is_seeded_partition() {
    let ds = synthetic(50, terrain(), 1);
    let s = ds.split(3, 0.8);
    assert_eq!((s.train.len(), s.validation.len()), (40, 10));
    let mut all: Vec<usize> = s.train.iter().chain(&s.validation).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..50).collect::<Vec<_>>());
    assert_eq!(s, ds.split(3, 0.8));
    assert_ne!(s, ds.split(4, 0.8));
}

#[test]
fn standardization_uses_train_statistics() {
    let ds = synthetic(20, all_heads(), 2);
    let stats = label_statistics(&ds, &[0, 1, 2, 3]);
    assert_eq!(stats.len(), 1);
    let mut values = Vec::new();
    for i in 0..4 {
        let HeadLabels::Continuous(v) = &ds.samples[i].labels[2] else { unreachable!() };
        values.extend(v.chunks(2).map(|c| c[0]));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    assert!((stats[0].mean[0] - mean).abs() < 1e-12);
    assert!((stats[0].destandardize(0, stats[0].standardize(0, 3.3)) - 3.3).abs() < 1e-12);
}

#[test]
fn constant_predictor_accuracy_is_class_frequency() {
    let ds = synthetic(40, terrain(), 5);
    let mut m = Model::new(small_config(Variant::None, terrain()), 1).unwrap();
    m.params_mut().get_mut("head.terrain.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    m.params_mut().get_mut("head.terrain.bias").unwrap().data_mut().copy_from_slice(&[0.0, 4.0, 0.0]);
    let idx: Vec<usize> = (0..40).collect();
    let report = evaluate(&m, &[], &ds, &idx).unwrap();
    let ones = ds
        .samples
        .iter()
        .flat_map(|s| match &s.labels[0] {
            HeadLabels::Discrete(c) => c.clone(),
            _ => unreachable!(),
        })
        .filter(|&c| c == 1)
        .count();
    assert!((report.metric("terrain").unwrap() - ones as f64 / 480.0).abs() < 1e-12);

    let mut all_one = ds.clone();
    all_one.samples.iter_mut().for_each(|s| s.labels[0] = HeadLabels::Discrete(vec![1; 12]));
    assert_eq!(evaluate(&m, &[], &all_one, &idx).unwrap().metric("terrain"), Some(1.0));
    assert!(evaluate(&m, &[], &all_one, &[]).is_err());
}

#[test]
fn evaluation_ties_go_to_lowest_class() {
    let ds = synthetic(8, terrain(), 5);
    let mut m = Model::new(small_config(Variant::None, terrain()), 1).unwrap();
    m.params_mut().get_mut("head.terrain.weight").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut zero = ds.clone();
    zero.samples.iter_mut().for_each(|s| s.labels[0] = HeadLabels::Discrete(vec![0; 12]));
    let idx: Vec<usize> = (0..8).collect();
    assert_eq!(evaluate(&m, &[], &zero, &idx).unwrap().metric("terrain"), Some(1.0));
}

#[test]
fn single_sample_is_memorized() {
    let ds = synthetic(1, all_heads(), 8);
    let config = ModelConfig { variant: Variant::Trajectory, heads: all_heads(), ..ModelConfig::default() };
    let stats = label_statistics(&ds, &[0]);
    let mut m = Model::new(config, 3).unwrap();
    let mut adam = Adam::new(AdamConfig { learning_rate: 3e-2, ..AdamConfig::default() }, m.params());
    let targets = BatchTargets::from_dataset(&ds, &[0], &stats);
    let mut last = f64::INFINITY;
    let mut comp = LossComponents::default();
    for _ in 0..500 {
        let mut tape = Tape::new();
        let p = m.bind(&mut tape, true);
        let img = tape.constant(ds.images(&[0]));
        let (_, vars) = m.forward_full(&mut tape, &p, img, &ds.actions(&[0])).unwrap();
        let loss = compute_loss(&mut tape, m.config(), &vars, &targets, 1.0).unwrap();
        last = loss.components.total;
        comp = loss.components;
        tape.backward(loss.total).unwrap();
        let grads = p.gradients(&tape);
        adam.step(m.params_mut(), &grads).unwrap();
    }
    assert!(last < 0.01, "loss after 500 steps: {last} {comp:?}");
}

#[test]
fn attention_loss_reaches_recurrence_and_encoder() {
    let ds = synthetic(4, terrain(), 8);
    let m = Model::new(small_config(Variant::Trajectory, terrain()), 3).unwrap();
    let idx = [0, 1, 2, 3];
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, true);
    let img = tape.constant(ds.images(&idx));
    let (_, vars) = m.forward_full(&mut tape, &p, img, &ds.actions(&idx)).unwrap();
    let targets = BatchTargets::from_dataset(&ds, &idx, &[]);
    let mut total = None;
    for (&pred, truth) in vars.positions.iter().zip(&targets.positions) {
        let t = tape.constant(truth.clone());
        let d = tape.sub(pred, t).unwrap();
        let sq = tape.square(d);
        let s = tape.sum(sq);
        total = Some(match total {
            None => s,
            Some(a) => tape.add(a, s).unwrap(),
        });
    }
    tape.backward(total.unwrap()).unwrap();
    for name in ["lower.w_hh", "attn_head.weight", "conv0.weight", "image_embed.weight"] {
        let g = tape.grad(p.get(name).unwrap()).unwrap();
        assert!(g.l2_norm() > 0.0, "{name} has no gradient");
    }
}

#[test]
fn training_is_deterministic_and_selects_best_epoch() {
    let ds = synthetic(40, all_heads(), 9);
    let config = small_config(Variant::Trajectory, all_heads());
    let cfg = TrainConfig { epochs: 3, batch_size: 8, ..TrainConfig::default() };
    let a = train(&ds, &config, &cfg, 4, "abc").unwrap();
    let b = train(&ds, &config, &cfg, 4, "abc").unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.trained.model.params(), b.trained.model.params());
    let mut csv_a = Vec::new();
    write_metrics_csv(&mut csv_a, &a.metrics).unwrap();
    let text = String::from_utf8(csv_a).unwrap();
    assert!(text.starts_with("epoch,split,head,metric,value,seed,config_hash\n"));
    let best = a
        .metrics
        .iter()
        .filter(|r| r.split == "val" && r.head == "terrain")
        .max_by(|x, y| x.value.partial_cmp(&y.value).unwrap().then(y.epoch.cmp(&x.epoch)))
        .unwrap();
    assert_eq!(best.epoch, a.best_epoch);
    let c = train(&ds, &config, &cfg, 5, "abc").unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn checkpoint_round_trip_keeps_metadata() {
    let ds = synthetic(20, all_heads(), 9);
    let config = small_config(Variant::SelfAttention, all_heads());
    let cfg = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
    let out = train(&ds, &config, &cfg, 4, "cafe").unwrap();
    let mut bytes = Vec::new();
    out.trained.write(&mut bytes).unwrap();
    let back = TrainedModel::read(bytes.as_slice()).unwrap();
    assert_eq!(back.meta, out.trained.meta);
    assert_eq!(back.model.params(), out.trained.model.params());
    let idx: Vec<usize> = (0..20).collect();
    assert_eq!(back.evaluate(&ds, &idx).unwrap(), out.trained.evaluate(&ds, &idx).unwrap());
}

#[test]
fn training_rejects_incompatible_data() {
    let ds = synthetic(20, terrain(), 9);
    let config = small_config(Variant::None, all_heads());
    assert!(train(&ds, &config, &TrainConfig::default(), 1, "").is_err());
}
