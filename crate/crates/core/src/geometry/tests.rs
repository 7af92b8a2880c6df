use std::f64::consts::FRAC_PI_2;

use nalgebra::Vector3;
use proptest::prelude::*;

use super::*;

fn camera_32() -> CameraIntrinsics {
    CameraIntrinsics::new(32.0, 32.0, 16.0, 16.0, 32, 32).unwrap()
}

#[test]
fn world_to_robot_examples() {
    let p = Vector3::new(1.0, 2.0, 3.0);
    assert_eq!(world_to_robot(&p, &PoseSE3::identity()), p);
    let shifted = PoseSE3::planar(5.0, 0.0, 0.0);
    assert_eq!(world_to_robot(&Vector3::new(6.0, 0.0, 0.0), &shifted), Vector3::new(1.0, 0.0, 0.0));
    // yawed 90 degrees: robot forward is world +y, so one metre ahead is (2, 4)
    let yawed = PoseSE3::planar(2.0, 3.0, FRAC_PI_2);
    let r = world_to_robot(&Vector3::new(2.0, 4.0, 0.0), &yawed);
    assert!((r - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
}

#[test]
fn pose_rejects_non_rotation() {
    let m = nalgebra::Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    assert!(PoseSE3::new(m, Vector3::zeros()).is_err());
    let reflect = nalgebra::Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
    assert!(PoseSE3::new(reflect, Vector3::zeros()).is_err());
}

#[test]
fn projection_examples() {
    let k = camera_32();
    let cam = PoseSE3::forward_camera(0.0, 0.0);
    // 2 m ahead, 0.5 m to the right (robot -y)
    let p = robot_to_pixel(&Vector3::new(2.0, -0.5, 0.0), &cam, &k);
    assert!((p.u - 24.0).abs() < 1e-12 && (p.v - 16.0).abs() < 1e-12);
    for depth in [0.5, 3.0, 40.0] {
        let on_axis = robot_to_pixel(&Vector3::new(depth, 0.0, 0.0), &cam, &k);
        assert!((on_axis.u - 16.0).abs() < 1e-12 && (on_axis.v - 16.0).abs() < 1e-12);
    }
    let near = robot_to_pixel(&Vector3::new(2.0, 1.0, 0.0), &cam, &k);
    let far = robot_to_pixel(&Vector3::new(4.0, 1.0, 0.0), &cam, &k);
    assert!(((far.u - k.cx) - 0.5 * (near.u - k.cx)).abs() < 1e-12);
}

#[test]
fn pitched_camera_principal_ray_hits_ground_at_expected_depth() {
    let (h, pitch) = (1.5f64, 15f64.to_radians());
    let cam = PoseSE3::forward_camera(h, pitch);
    let ground = h / pitch.tan();
    let p = robot_to_pixel(&Vector3::new(ground, 0.0, 0.0), &cam, &camera_32());
    assert!((p.u - 16.0).abs() < 1e-9 && (p.v - 16.0).abs() < 1e-9);
}

#[test]
fn behind_camera_is_flagged_and_finite() {
    let cam = PoseSE3::forward_camera(0.5, 0.2);
    let p = robot_to_pixel(&Vector3::new(-3.0, 1.0, 0.0), &cam, &camera_32());
    assert!(p.clamped);
    assert_eq!(p.depth, DEPTH_MIN);
    assert!(p.u.is_finite() && p.v.is_finite() && p.jacobian.iter().all(|v| v.is_finite()));
}

#[test]
fn projection_jacobian_matches_central_differences() {
    let k = camera_32();
    let cam = PoseSE3::forward_camera(1.5, 0.26);
    let h = 1e-6;
    for x in [[3.0, 0.4, 0.0], [7.5, -2.0, 0.3], [1.2, 0.9, -0.1]] {
        let x = Vector3::from(x);
        let p = robot_to_pixel(&x, &cam, &k);
        for axis in 0..3 {
            let mut dx = Vector3::zeros();
            dx[axis] = h;
            let plus = robot_to_pixel(&(x + dx), &cam, &k);
            let minus = robot_to_pixel(&(x - dx), &cam, &k);
            let num = [(plus.u - minus.u) / (2.0 * h), (plus.v - minus.v) / (2.0 * h)];
            for row in 0..2 {
                let a = p.jacobian[(row, axis)];
                let rel = (a - num[row]).abs() / a.abs().max(num[row].abs()).max(1e-3);
                assert!(rel < 1e-6, "axis {axis} row {row}: {a} vs {}", num[row]);
            }
        }
    }
}

#[test]
fn featuremap_mapping_examples() {
    let g = FeatureMapGeometry::new(vec![2, 2, 2], 128, 64).unwrap();
    let c = pixel_to_featuremap(64.0, 32.0, &g);
    assert_eq!((c.x, c.y), (8.0, 4.0));
    let unit = FeatureMapGeometry::new(vec![1], 16, 16).unwrap();
    let c = pixel_to_featuremap(3.25, 7.5, &unit);
    assert_eq!((c.x, c.y), (3.25, 7.5));
    let g2 = FeatureMapGeometry::new(vec![2], 32, 32).unwrap();
    let c = pixel_to_featuremap(-5.0, 3.0, &g2);
    assert_eq!((c.x, c.y), (0.0, 1.5));
    assert_eq!((c.dx_du, c.dy_dv), (0.0, 0.5));
    assert!(FeatureMapGeometry::new(vec![2, 2], 30, 32).is_err());
}

#[test]
fn mask_peak_and_unit_distance_values() {
    let cov = AttentionCovariance::isotropic_sigma(1.0);
    let m = gaussian_mask([3.0, 4.0], &cov, 8, 8);
    assert!((m.at(3, 4) - 1.0).abs() < 1e-15);
    assert!((m.at(4, 4) - (-0.5f64).exp()).abs() < 1e-15);
    assert!((m.at(3, 3) - 0.6065306597126334).abs() < 1e-12);
    let wide = gaussian_mask([3.0, 4.0], &AttentionCovariance::isotropic_sigma(2.0), 8, 8);
    assert!((wide.at(3, 4) - 0.25).abs() < 1e-15);
}

#[test]
fn covariance_variants_agree_on_identity() {
    let iso = gaussian_mask([2.3, 5.1], &AttentionCovariance::isotropic_sigma(1.0), 8, 8);
    let full = gaussian_mask([2.3, 5.1], &AttentionCovariance::Full { factor: [1.0, 0.0, 0.0, 1.0] }, 8, 8);
    let diag = gaussian_mask([2.3, 5.1], &AttentionCovariance::Diagonal { log_var: [0.0, 0.0] }, 8, 8);
    assert_eq!(iso, full);
    assert_eq!(iso, diag);
}

#[test]
fn degenerate_covariance_is_floored() {
    let flat = AttentionCovariance::Full { factor: [1.0, 2.0, 2.0, 4.0] };
    let m = gaussian_mask([1.0, 1.0], &flat, 4, 4);
    assert!(m.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    let det = flat.covariance().determinant();
    assert!(det > 1e-12);
    assert!((m.at(1, 1) - det.powf(-0.5)).abs() < 1e-9);
    let tiny = AttentionCovariance::Isotropic { log_var: -80.0 };
    assert!((tiny.covariance()[(0, 0)] - MIN_VARIANCE).abs() < 1e-18);
}

#[test]
fn covariance_param_count_checked() {
    assert!(AttentionCovariance::from_params(CovarianceVariant::Full, &[1.0]).is_err());
    assert!(AttentionCovariance::from_params(CovarianceVariant::Diagonal, &[1.0, 0.0]).is_ok());
}

fn mask_vjp_check(x_attn: [f64; 2], cov: AttentionCovariance) {
    let (w, h) = (6, 5);
    let upstream: Vec<f64> = (0..w * h).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
    let loss = |x: [f64; 2], c: &AttentionCovariance| -> f64 {
        gaussian_mask(x, c, w, h).values.iter().zip(&upstream).map(|(a, b)| a * b).sum()
    };
    let (dx, dp) = gaussian_mask_vjp(x_attn, &cov, w, h, &upstream);
    let step = 1e-6;
    for axis in 0..2 {
        let (mut plus, mut minus) = (x_attn, x_attn);
        plus[axis] += step;
        minus[axis] -= step;
        let num = (loss(plus, &cov) - loss(minus, &cov)) / (2.0 * step);
        assert!((dx[axis] - num).abs() < 1e-6 * num.abs().max(1.0), "x[{axis}]: {} vs {num}", dx[axis]);
    }
    let params: Vec<f64> = match cov {
        AttentionCovariance::Isotropic { log_var } => vec![log_var],
        AttentionCovariance::Diagonal { log_var } => log_var.to_vec(),
        AttentionCovariance::Full { factor } => factor.to_vec(),
    };
    for i in 0..params.len() {
        let (mut plus, mut minus) = (params.clone(), params.clone());
        plus[i] += step;
        minus[i] -= step;
        let cp = AttentionCovariance::from_params(cov.variant(), &plus).unwrap();
        let cm = AttentionCovariance::from_params(cov.variant(), &minus).unwrap();
        let num = (loss(x_attn, &cp) - loss(x_attn, &cm)) / (2.0 * step);
        assert!((dp[i] - num).abs() < 1e-6 * num.abs().max(1.0), "param {i}: {} vs {num}", dp[i]);
    }
}

#[test]
fn mask_gradients_match_central_differences() {
    mask_vjp_check([2.4, 1.7], AttentionCovariance::Isotropic { log_var: 0.8 });
    mask_vjp_check([0.3, 3.9], AttentionCovariance::Diagonal { log_var: [0.2, 1.1] });
    mask_vjp_check([4.1, 2.2], AttentionCovariance::Full { factor: [1.2, 0.3, -0.4, 0.9] });
}

proptest! {
    #[test]
    fn world_robot_round_trip(x in -50.0f64..50.0, y in -50.0f64..50.0, yaw in -3.2f64..3.2,
                              px in -100.0f64..100.0, py in -100.0f64..100.0, pz in -5.0f64..5.0) {
        let pose = PoseSE3::planar(x, y, yaw);
        let p = Vector3::new(px, py, pz);
        let back = robot_to_world(&world_to_robot(&p, &pose), &pose);
        prop_assert!((back - p).abs().max() < 1e-12);
    }

    #[test]
    fn mask_argmax_is_rounded_attention(x in 1.0f64..6.0, y in 1.0f64..6.0, log_var in -2.0f64..2.0) {
        // skip points equidistant from two cells
        prop_assume!((x.fract() - 0.5).abs() > 1e-6 && (y.fract() - 0.5).abs() > 1e-6);
        let m = gaussian_mask([x, y], &AttentionCovariance::Isotropic { log_var }, 8, 8);
        prop_assert_eq!(m.argmax(), (x.round() as usize, y.round() as usize));
    }

    #[test]
    fn mask_positive_and_decreasing_in_mahalanobis(x in 0.0f64..7.0, y in 0.0f64..7.0,
                                                  a in 0.5f64..2.0, b in -0.5f64..0.5, c in 0.5f64..2.0) {
        let cov = AttentionCovariance::Full { factor: [a, 0.0, b, c] };
        let m = gaussian_mask([x, y], &cov, 8, 8);
        let p = cov.covariance().try_inverse().unwrap();
        let mut pairs: Vec<(f64, f64)> = (0..64).map(|i| {
            let d = nalgebra::Vector2::new((i % 8) as f64 - x, (i / 8) as f64 - y);
            (d.dot(&(p * d)), m.values[i])
        }).collect();
        prop_assert!(pairs.iter().all(|&(_, v)| v > 0.0));
        pairs.sort_by(|l, r| l.0.partial_cmp(&r.0).unwrap());
        for w in pairs.windows(2) {
            if w[1].0 > w[0].0 + 1e-9 {
                prop_assert!(w[1].1 < w[0].1);
            }
        }
    }

    #[test]
    fn variants_agree_for_equal_sigma(x in 0.0f64..7.0, y in 0.0f64..7.0, s1 in 0.3f64..3.0, s2 in 0.3f64..3.0) {
        let diag = gaussian_mask([x, y], &AttentionCovariance::Diagonal { log_var: [(s1 * s1).ln(), (s2 * s2).ln()] }, 8, 8);
        let full = gaussian_mask([x, y], &AttentionCovariance::Full { factor: [s1, 0.0, 0.0, s2] }, 8, 8);
        let diff = diag.values.iter().zip(&full.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12);
        let iso = gaussian_mask([x, y], &AttentionCovariance::Isotropic { log_var: (s1 * s1).ln() }, 8, 8);
        let full_iso = gaussian_mask([x, y], &AttentionCovariance::Full { factor: [s1, 0.0, 0.0, s1] }, 8, 8);
        let diff = iso.values.iter().zip(&full_iso.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(diff < 1e-12);
    }
}
