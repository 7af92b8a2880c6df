use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::gradcheck::check_gradients;
use crate::autodiff::{BoundParams, Tape, Tensor};
use crate::geometry::{CameraIntrinsics, CameraRig, CovarianceVariant};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn config(variant: Variant) -> ModelConfig {
    ModelConfig { variant, hidden: 16, ..ModelConfig::default() }
}

fn inputs(c: &ModelConfig, batch: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = random(&mut rng, &[batch, 3, c.image_height, c.image_width], 0.0, 1.0);
    let act = random(&mut rng, &[batch, c.horizon, c.action_dim], -1.0, 1.0);
    (img, act)
}

#[test]
fn encoder_output_dims() {
    for v in Variant::ALL {
        let m = Model::new(config(v), 1).unwrap();
        let (img, act) = inputs(m.config(), 2, 3);
        let out = m.predict(&img, &act).unwrap();
        assert_eq!(out.feature_map.shape(), &[2, 16, 8, 8]);
        assert_eq!(out.events[0].shape(), &[2, 12, 2]);
        match v {
            Variant::Trajectory => {
                assert_eq!(out.positions.as_ref().unwrap().shape(), &[2, 12, 2]);
                assert_eq!(out.masks.as_ref().unwrap().shape(), &[2, 12, 8, 8]);
            }
            Variant::SelfAttention => {
                assert!(out.positions.is_none());
                assert_eq!(out.masks.as_ref().unwrap().shape(), &[2, 12, 8, 8]);
            }
            Variant::None => assert!(out.masks.is_none() && out.positions.is_none()),
        }
    }
}

#[test]
fn identical_inputs_give_identical_outputs() {
    let m = Model::new(config(Variant::Trajectory), 5).unwrap();
    let (img, act) = inputs(m.config(), 3, 9);
    assert_eq!(m.predict(&img, &act).unwrap(), m.predict(&img, &act).unwrap());
    let again = Model::new(config(Variant::Trajectory), 5).unwrap();
    assert_eq!(m.params(), again.params());
}

#[test]
fn zero_image_with_zero_biases_gives_zero_features() {
    let m = Model::new(config(Variant::None), 2).unwrap();
    let img = Tensor::zeros(&[1, 3, 32, 32]);
    let enc = m.encode(&img).unwrap();
    assert!(enc.fmap.data().iter().all(|&v| v == 0.0));
}

#[test]
fn rejects_bad_shapes_and_configs() {
    let m = Model::new(config(Variant::Trajectory), 2).unwrap();
    let (img, act) = inputs(m.config(), 1, 1);
    assert!(m.predict(&Tensor::zeros(&[1, 3, 16, 32]), &act).is_err());
    assert!(m.predict(&img, &Tensor::zeros(&[1, 11, 1])).is_err());
    let bad = ModelConfig { convs: vec![ConvSpec { kernel: 4, channels: 8, stride: 2 }], ..config(Variant::None) };
    assert!(Model::new(bad, 0).is_err());
    let bad = ModelConfig { convs: vec![ConvSpec { kernel: 3, channels: 8, stride: 3 }], ..config(Variant::None) };
    assert!(Model::new(bad, 0).is_err());
    let bad = ModelConfig { horizon: 0, ..config(Variant::None) };
    assert!(Model::new(bad, 0).is_err());
    let bad = ModelConfig { heads: vec![EventHeadSpec::discrete("x", 1)], ..config(Variant::None) };
    assert!(Model::new(bad, 0).is_err());
}

#[test]
fn from_params_checks_names_and_shapes() {
    let m = Model::new(config(Variant::Trajectory), 2).unwrap();
    assert!(Model::from_params(config(Variant::Trajectory), m.params().clone()).is_ok());
    assert!(Model::from_params(config(Variant::None), m.params().clone()).is_err());
    assert!(Model::from_params(config(Variant::SelfAttention), m.params().clone()).is_err());
}

#[test]
fn first_step_independent_of_horizon() {
    for v in Variant::ALL {
        let long = Model::new(config(v), 4).unwrap();
        let short = Model::from_params(ModelConfig { horizon: 1, ..config(v) }, long.params().clone()).unwrap();
        let (img, act) = inputs(long.config(), 2, 8);
        let first = Tensor::new(vec![2, 1, 1], vec![act.data()[0], act.data()[12]]).unwrap();
        let a = long.predict(&img, &act).unwrap();
        let b = short.predict(&img, &first).unwrap();
        for b_idx in 0..2 {
            assert_eq!(&a.events[0].data()[b_idx * 24..b_idx * 24 + 2], &b.events[0].data()[b_idx * 2..b_idx * 2 + 2]);
        }
    }
}

#[test]
fn later_actions_do_not_affect_earlier_steps() {
    for v in Variant::ALL {
        let m = Model::new(config(v), 6).unwrap();
        let (img, act) = inputs(m.config(), 1, 2);
        let mut changed = act.clone();
        for i in 7..12 {
            changed.data_mut()[i] = -changed.data()[i] + 0.3;
        }
        let a = m.predict(&img, &act).unwrap();
        let b = m.predict(&img, &changed).unwrap();
        assert_eq!(&a.events[0].data()[..14], &b.events[0].data()[..14], "{v}");
        assert_ne!(&a.events[0].data()[14..], &b.events[0].data()[14..], "{v}");
    }
}

#[test]
fn zero_weights_give_zero_positions() {
    let mut m = Model::new(config(Variant::Trajectory), 1).unwrap();
    m.params_mut().values_mut().for_each(|t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let (img, act) = inputs(m.config(), 2, 1);
    let out = m.predict(&img, &act).unwrap();
    assert!(out.positions.unwrap().data().iter().all(|&v| v == 0.0));
}

fn mask_for(m: &Model, x: f64, y: f64) -> Vec<f64> {
    let mut tape = Tape::new();
    let pos = tape.constant(Tensor::new(vec![1, 2], vec![x, y]).unwrap());
    let cov = tape.constant(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let mask = m.coord_to_mask(&mut tape, pos, cov).unwrap();
    tape.value(mask).data().to_vec()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, i| if v[i] > v[best] { i } else { best })
}

#[test]
fn coord_to_mask_on_optical_axis_peaks_at_center() {
    let m = Model::new(config(Variant::Trajectory), 1).unwrap();
    let rig = m.config().camera;
    let ahead = rig.height / rig.pitch_deg.to_radians().tan();
    let mask = mask_for(&m, ahead, 0.0);
    assert_eq!(argmax(&mask), 4 * 8 + 4);
    assert!((mask[4 * 8 + 4] - 1.0).abs() < 1e-9);
}

#[test]
fn coord_to_mask_left_right_mirror() {
    // principal point on the receptive-field centre line of an 8-cell map
    let intrinsics = CameraIntrinsics { fx: 32.0, fy: 32.0, cx: 14.0, cy: 14.0, image_w: 32, image_h: 32 };
    let c = ModelConfig { camera: CameraRig { intrinsics, ..CameraRig::default() }, ..config(Variant::Trajectory) };
    let m = Model::new(c, 1).unwrap();
    let left = mask_for(&m, 4.0, 1.0);
    let right = mask_for(&m, 4.0, -1.0);
    for row in 0..8 {
        for col in 0..8 {
            let (a, b) = (left[row * 8 + col], right[row * 8 + 7 - col]);
            assert!((a - b).abs() < 1e-12, "row {row} col {col}: {a} vs {b}");
        }
    }
    assert_ne!(left, right);
}

#[test]
fn coord_to_mask_behind_camera_is_finite() {
    let m = Model::new(config(Variant::Trajectory), 1).unwrap();
    let mask = mask_for(&m, -5.0, 0.3);
    assert!(mask.iter().all(|v| v.is_finite()));
    let mut tape = Tape::new();
    let pos = tape.param(Tensor::new(vec![1, 2], vec![-5.0, 0.3]).unwrap());
    let cov = tape.param(Tensor::new(vec![1, 1], vec![0.0]).unwrap());
    let mask = m.coord_to_mask(&mut tape, pos, cov).unwrap();
    let loss = tape.sum(mask);
    tape.backward(loss).unwrap();
    assert!(tape.grad(pos).unwrap().is_finite());
}

#[test]
fn coord_to_mask_gradients_match_central_differences() {
    let c = ModelConfig { covariance: CovarianceVariant::Full, ..config(Variant::Trajectory) };
    let m = Model::new(c, 1).unwrap();
    let pos = Tensor::new(vec![2, 2], vec![3.0, 0.4, 5.5, -0.8]).unwrap();
    let cov = Tensor::new(vec![2, 4], vec![1.2, 0.2, -0.1, 0.9, 0.7, 0.0, 0.3, 1.4]).unwrap();
    let report = check_gradients(&[pos, cov], 1e-5, |tape, v| {
        let mask = m.coord_to_mask(tape, v[0], v[1]).map_err(|e| match e {
            ModelError::Autodiff(a) => a,
            other => panic!("{other}"),
        })?;
        let w = tape.constant(Tensor::new(vec![2, 8, 8], (0..128).map(|i| ((i * 37) % 13) as f64 - 6.0).collect())?);
        let prod = tape.mul(mask, w)?;
        Ok(tape.sum(prod))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

fn events_with_masks(m: &Model, img: &Tensor, act: &Tensor, mask_value: Option<f64>) -> Vec<f64> {
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, false);
    let x = tape.constant(img.clone());
    let enc = m.encode_image(&mut tape, &p, x).unwrap();
    let emb = m.embed_actions(&mut tape, &p, act).unwrap();
    let batch = img.shape()[0];
    let masks: Option<Vec<_>> =
        mask_value.map(|v| (0..12).map(|_| tape.constant(Tensor::full(&[batch, 8, 8], v))).collect());
    let out = m.predict_events(&mut tape, &p, enc.fmap, masks.as_deref(), None, &emb).unwrap();
    out[0].iter().flat_map(|&v| tape.value(v).data().to_vec()).collect()
}

#[test]
fn ones_mask_matches_unmasked_and_zero_mask_ignores_image() {
    let m = Model::new(config(Variant::Trajectory), 3).unwrap();
    let (img, act) = inputs(m.config(), 2, 4);
    assert_eq!(events_with_masks(&m, &img, &act, Some(1.0)), events_with_masks(&m, &img, &act, None));
    let (other, _) = inputs(m.config(), 2, 99);
    assert_eq!(events_with_masks(&m, &img, &act, Some(0.0)), events_with_masks(&m, &other, &act, Some(0.0)));
}

#[test]
fn self_attention_masks_are_distributions() {
    let mut m = Model::new(config(Variant::SelfAttention), 3).unwrap();
    let (img, act) = inputs(m.config(), 2, 4);
    let masks = m.predict(&img, &act).unwrap().masks.unwrap();
    for chunk in masks.data().chunks(64) {
        assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for name in ["attn_head.weight", "attn_head.bias"] {
        m.params_mut().get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let masks = m.predict(&img, &act).unwrap().masks.unwrap();
    assert!(masks.data().iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
}

#[test]
fn discrete_heads_emit_distributions() {
    let c = ModelConfig {
        heads: vec![
            EventHeadSpec::discrete("terrain", 3),
            EventHeadSpec::discrete("collision", 2),
            EventHeadSpec::continuous("dpos", 2),
        ],
        ..config(Variant::Trajectory)
    };
    let m = Model::new(c, 3).unwrap();
    let (img, act) = inputs(m.config(), 3, 4);
    let out = m.predict(&img, &act).unwrap();
    for (k, width) in [(0, 3), (1, 2)] {
        for p in out.events[k].data().chunks(width) {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }
    assert_eq!(out.events[2].shape(), &[3, 12, 2]);
}

#[test]
fn rollouts_reuse_one_encoding() {
    for v in Variant::ALL {
        let m = Model::new(config(v), 7).unwrap();
        let (img, act) = inputs(m.config(), 5, 1);
        let single = img.batch_item(0);
        m.reset_encode_count();
        let enc = m.encode(&single).unwrap();
        let shared = m.predict_rollouts(&enc, &act).unwrap();
        assert_eq!(m.encode_count(), 1);
        for i in 0..5 {
            let alone = m.predict(&single, &act.batch_item(i)).unwrap();
            for (k, e) in alone.events.iter().enumerate() {
                let n = e.numel();
                let diff = e
                    .data()
                    .iter()
                    .zip(&shared.events[k].data()[i * n..(i + 1) * n])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff < 1e-12, "{v} rollout {i}: {diff}");
            }
        }
    }
}

/// Network-level gradient check on a small configuration. Every weight is
/// a checked input; the loss mixes cross-entropy, squared error and an
/// attention-position term.
pub(crate) fn network_gradient_error(variant: Variant, seed: u64) -> f64 {
    let c = ModelConfig {
        variant,
        horizon: 3,
        image_width: 8,
        image_height: 8,
        convs: vec![ConvSpec { kernel: 3, channels: 4, stride: 2 }, ConvSpec { kernel: 3, channels: 4, stride: 2 }],
        hidden: 4,
        action_embedding: 3,
        heads: vec![EventHeadSpec::discrete("terrain", 3), EventHeadSpec::continuous("dpos", 2)],
        camera: CameraRig {
            intrinsics: CameraIntrinsics { fx: 8.0, fy: 8.0, cx: 4.0, cy: 4.0, image_w: 8, image_h: 8 },
            height: 0.5,
            pitch_deg: 10.0,
        },
        position_scale: 1.0,
        ..ModelConfig::default()
    };
    let mut m = Model::new(c, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    // keep attention points ahead of the camera so masks are smooth in the weights
    if variant == Variant::Trajectory {
        let b = m.params_mut().get_mut("attn_head.bias").unwrap();
        b.data_mut()[0] = 3.0;
    }
    let img = random(&mut rng, &[2, 3, 8, 8], 0.0, 1.0);
    let act = random(&mut rng, &[2, 3, 1], -1.0, 1.0);
    let names: Vec<String> = m.params().iter().map(|(n, _)| n.to_string()).collect();
    let values: Vec<Tensor> = m.params().iter().map(|(_, t)| t.clone()).collect();
    let labels = [vec![0, 2], vec![1, 1], vec![2, 0]];
    let report = check_gradients(&values, 1e-5, |tape, vars| {
        let p = BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let x = tape.constant(img.clone());
        let lift = |e: ModelError| match e {
            ModelError::Autodiff(a) => a,
            other => panic!("{other}"),
        };
        let (_, fw) = m.forward_full(tape, &p, x, &act).map_err(lift)?;
        let mut terms = Vec::new();
        for (i, &logits) in fw.outputs[0].iter().enumerate() {
            let lp = tape.log_softmax(logits, 1)?;
            let picked = tape.pick(lp, &labels[i])?;
            terms.push(tape.sum(picked));
        }
        for &v in &fw.outputs[1] {
            let sq = tape.square(v);
            terms.push(tape.sum(sq));
        }
        for &pos in &fw.positions {
            let sq = tape.square(pos);
            terms.push(tape.sum(sq));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok(total)
    })
    .unwrap();
    report.max_rel_error
}

#[test]
fn network_gradients_match_central_differences() {
    for v in Variant::ALL {
        let err = network_gradient_error(v, 11);
        assert!(err < 1e-3, "{v}: {err}");
    }
}

#[test]
fn mask_spread_starts_at_init_sigma_and_respects_the_bound() {
    use crate::geometry::AttentionCovariance;
    for cov in [CovarianceVariant::Isotropic, CovarianceVariant::Diagonal, CovarianceVariant::Full] {
        for max_sigma in [None, Some(0.75)] {
            let c = ModelConfig { covariance: cov, max_sigma, ..config(Variant::Trajectory) };
            let m = Model::new(c.clone(), 1).unwrap();
            let n = cov.num_params();
            let init = super::network::covariance_init(&c);
            let mut raw = init.clone();
            raw.extend(std::iter::repeat(40.0).take(n));
            raw.extend(std::iter::repeat(-40.0).take(n));
            let mut tape = Tape::new();
            let v = tape.constant(Tensor::new(vec![3, n], raw).unwrap());
            let b = m.bound_covariance(&mut tape, v).unwrap();
            let out = tape.value(b).data().to_vec();
            let sigma = AttentionCovariance::from_params(cov, &out[..n]).unwrap().covariance();
            assert!((sigma - nalgebra::Matrix2::identity() * 0.25).abs().max() < 1e-12, "{cov:?} {sigma}");
            if let Some(ms) = max_sigma {
                // Entries of the full factor are bounded, so its spread is within 2 max_sigma.
                let cap = if cov == CovarianceVariant::Full { 4.0 * ms * ms } else { ms * ms };
                for row in out.chunks(n).skip(1) {
                    let s = AttentionCovariance::from_params(cov, row).unwrap().covariance();
                    assert!(s.symmetric_eigenvalues().max() <= cap + 2.0 * crate::geometry::MIN_VARIANCE, "{cov:?} {s}");
                }
            }
        }
    }
}
