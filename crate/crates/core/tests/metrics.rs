use conflift::metrics::*;
use conflift::pose::PoseSeq3D;
use nalgebra::{DMatrix, DVector, Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_pose(rng: &mut ChaCha8Rng, frames: usize, joints: usize, spread: f64) -> PoseSeq3D {
    PoseSeq3D::new(frames, joints, (0..frames * joints * 3).map(|_| rng.gen_range(-spread..spread)).collect()).unwrap()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation3<f64> {
    let axis = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.gen_range(-3.0..3.0))
}

fn similarity(pose: &PoseSeq3D, s: f64, r: &Rotation3<f64>, t: Vector3<f64>) -> PoseSeq3D {
    let mut out = pose.clone();
    for n in 0..pose.frames {
        for j in 0..pose.joints {
            let p = s * (r * Vector3::from(pose.joint(n, j))) + t;
            out.set_joint(n, j, [p.x, p.y, p.z]);
        }
    }
    out
}

/// Umeyama's closed form: SVD of the cross-covariance, reflection-corrected
/// rotation, scale from the singular values.
fn umeyama_p_mpjpe(pred: &PoseSeq3D, gt: &PoseSeq3D) -> f64 {
    let mut total = 0.0;
    for n in 0..gt.frames {
        let a: Vec<Vector3<f64>> = (0..gt.joints).map(|j| Vector3::from(pred.joint(n, j))).collect();
        let b: Vec<Vector3<f64>> = (0..gt.joints).map(|j| Vector3::from(gt.joint(n, j))).collect();
        let ma = a.iter().sum::<Vector3<f64>>() / a.len() as f64;
        let mb = b.iter().sum::<Vector3<f64>>() / b.len() as f64;
        let a: Vec<_> = a.iter().map(|p| p - ma).collect();
        let b: Vec<_> = b.iter().map(|p| p - mb).collect();
        let mut cov = DMatrix::<f64>::zeros(3, 3);
        for (p, q) in a.iter().zip(&b) {
            for i in 0..3 {
                for k in 0..3 {
                    cov[(i, k)] += q[i] * p[k];
                }
            }
        }
        let svd = cov.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let d = if (&u * &vt).determinant() < 0.0 { -1.0 } else { 1.0 };
        let fix = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1.0, d]));
        let rot = &u * fix * &vt;
        let sv = &svd.singular_values;
        let var: f64 = a.iter().map(|p| p.norm_squared()).sum();
        let scale = (sv[0] + sv[1] + d * sv[2]) / var;
        for (p, q) in a.iter().zip(&b) {
            let rp = &rot * DVector::from_column_slice(p.as_slice());
            let r = Vector3::new(rp[0], rp[1], rp[2]);
            total += (scale * r - q).norm();
        }
    }
    total / (gt.frames * gt.joints) as f64
}

#[test]
fn p_mpjpe_matches_svd_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let gt = random_pose(&mut rng, 3, 8, 500.0);
        let pred = random_pose(&mut rng, 3, 8, 500.0);
        let ours = p_mpjpe(&pred, &gt).unwrap();
        let oracle = umeyama_p_mpjpe(&pred, &gt);
        assert!((ours - oracle).abs() < 1e-6, "{ours} vs {oracle}");
    }
}

#[test]
fn p_mpjpe_of_identity_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gt = random_pose(&mut rng, 4, 8, 300.0);
    assert!(p_mpjpe(&gt, &gt).unwrap() < 1e-9);
}

#[test]
fn collinear_frames_fall_back_to_translation() {
    let gt = PoseSeq3D::new(1, 3, vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
    let pred = PoseSeq3D::new(1, 3, vec![5.0, 1.0, 0.0, 6.0, 1.0, 0.0, 7.0, 1.0, 0.0]).unwrap();
    let out = p_mpjpe_detailed(&pred, &gt).unwrap();
    assert_eq!(out.degenerate_frames, 1);
    assert!(out.error_mm < 1e-12);
}

#[test]
fn mpjpe_matches_per_joint_norms() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = random_pose(&mut rng, 2, 3, 100.0);
    let pred = random_pose(&mut rng, 2, 3, 100.0);
    let mut sum = 0.0;
    for k in 0..6 {
        let d: f64 = (0..3).map(|c| (pred.coords[k * 3 + c] - gt.coords[k * 3 + c]).powi(2)).sum();
        sum += d.sqrt();
    }
    assert!((mpjpe(&pred, &gt).unwrap() - sum / 6.0).abs() < 1e-12);
}

#[test]
fn score_study_five_pair_fixture() {
    let pairs = [(0.9, 12.0), (0.7, 20.0), (0.4, 18.0), (0.3, 35.0), (0.1, 41.0)];
    let s = score_error_study(&pairs).unwrap();
    assert!((s.pearson_r - -0.8880112928431761).abs() < 1e-12);
    assert!((s.ols_slope - -34.01960784313723).abs() < 1e-9);
    assert!((s.ols_intercept - 41.52941176470586).abs() < 1e-9);
    assert!((s.ols_r2 - 0.7885640562170093).abs() < 1e-12);
    assert!(score_error_study(&pairs[..2]).is_err());
}

#[test]
fn auc_of_perfect_prediction() {
    let gt = PoseSeq3D::zeros(2, 4);
    // the 0 mm threshold never counts under the strict inequality
    let a = auc(&gt, &gt).unwrap();
    assert!((96.7..100.0).contains(&a));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn p_mpjpe_vanishes_under_similarity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_pose(&mut rng, 2, 8, 400.0);
        let r = random_rotation(&mut rng);
        let s = rng.gen_range(0.3..3.0);
        let t = Vector3::new(rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0), rng.gen_range(-500.0..500.0));
        let pred = similarity(&gt, s, &r, t);
        prop_assert!(p_mpjpe(&pred, &gt).unwrap() < 1e-9);
    }

    #[test]
    fn alignment_never_increases_error(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_pose(&mut rng, 2, 8, 400.0);
        let pred = random_pose(&mut rng, 2, 8, 400.0);
        prop_assert!(p_mpjpe(&pred, &gt).unwrap() <= mpjpe(&pred, &gt).unwrap() + 1e-9);
    }

    #[test]
    fn pck_monotone_and_auc_bounded(errs in prop::collection::vec(0.0f64..300.0, 1..30), a in 1.0f64..200.0, b in 1.0f64..200.0) {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assert!(pck_from_errors(&errs, lo) <= pck_from_errors(&errs, hi));
        let v = auc_from_errors(&errs);
        prop_assert!((0.0..=100.0).contains(&v));
    }

    #[test]
    fn metrics_ignore_frame_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_pose(&mut rng, 4, 8, 400.0);
        let pred = random_pose(&mut rng, 4, 8, 400.0);
        let order = [2usize, 0, 3, 1];
        let shuffle = |p: &PoseSeq3D| {
            let mut out = p.clone();
            for (dst, &src) in order.iter().enumerate() {
                for j in 0..8 {
                    out.set_joint(dst, j, p.joint(src, j));
                }
            }
            out
        };
        let (sp, sg) = (shuffle(&pred), shuffle(&gt));
        prop_assert!((mpjpe(&pred, &gt).unwrap() - mpjpe(&sp, &sg).unwrap()).abs() < 1e-9);
        prop_assert!((p_mpjpe(&pred, &gt).unwrap() - p_mpjpe(&sp, &sg).unwrap()).abs() < 1e-9);
        prop_assert_eq!(pck(&pred, &gt, 150.0).unwrap(), pck(&sp, &sg, 150.0).unwrap());
    }
}
