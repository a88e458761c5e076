//! Pose error metrics and the score/error correlation study.

use nalgebra::{Matrix3, Matrix4, Quaternion, SymmetricEigen, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::aggregate::dist3;
use crate::error::{Error, Result};
use crate::pose::PoseSeq3D;

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_THRESHOLDS: usize = 31;

/// Per-joint Euclidean errors in frame-major order.
pub fn joint_errors(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<Vec<f64>> {
    pred.ensure_same_shape(gt)?;
    Ok((0..gt.frames).flat_map(|n| (0..gt.joints).map(move |j| (n, j))).map(|(n, j)| dist3(pred.joint(n, j), gt.joint(n, j))).collect())
}

fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("joint errors"));
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

pub fn mpjpe(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<f64> {
    mean(&joint_errors(pred, gt)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesOutcome {
    pub error_mm: f64,
    pub aligned: PoseSeq3D,
    /// Frames that were rank-deficient and aligned by translation only.
    pub degenerate_frames: usize,
}

/// MPJPE after per-frame similarity alignment of `pred` onto `gt`.
pub fn p_mpjpe(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<f64> {
    Ok(p_mpjpe_detailed(pred, gt)?.error_mm)
}

pub fn p_mpjpe_detailed(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<ProcrustesOutcome> {
    pred.ensure_same_shape(gt)?;
    let mut aligned = PoseSeq3D::zeros(gt.frames, gt.joints);
    let mut degenerate_frames = 0;
    for n in 0..gt.frames {
        let xs: Vec<Vector3<f64>> = (0..gt.joints).map(|j| Vector3::from(pred.joint(n, j))).collect();
        let ys: Vec<Vector3<f64>> = (0..gt.joints).map(|j| Vector3::from(gt.joint(n, j))).collect();
        let (out, degenerate) = align_frame(&xs, &ys);
        degenerate_frames += usize::from(degenerate);
        for (j, p) in out.iter().enumerate() {
            aligned.set_joint(n, j, [p.x, p.y, p.z]);
        }
    }
    if degenerate_frames > 0 {
        log::warn!("P-MPJPE: {degenerate_frames} rank-deficient frames aligned by translation only");
    }
    Ok(ProcrustesOutcome { error_mm: mpjpe(&aligned, gt)?, aligned, degenerate_frames })
}

fn centroid(ps: &[Vector3<f64>]) -> Vector3<f64> {
    ps.iter().sum::<Vector3<f64>>() / ps.len() as f64
}

/// Least-squares similarity `s R x + t` mapping `xs` onto `ys`.
///
/// The rotation is the unit quaternion maximizing `sum y . R x`, i.e. the
/// top eigenvector of Horn's symmetric 4x4 matrix; this stays accurate to
/// round-off where a 3x3 SVD loses several digits.
fn align_frame(xs: &[Vector3<f64>], ys: &[Vector3<f64>]) -> (Vec<Vector3<f64>>, bool) {
    let mx = centroid(xs);
    let my = centroid(ys);
    let x0: Vec<_> = xs.iter().map(|p| p - mx).collect();
    let y0: Vec<_> = ys.iter().map(|p| p - my).collect();
    let var_x: f64 = x0.iter().map(|p| p.norm_squared()).sum();
    let mut s = Matrix3::zeros();
    for (x, y) in x0.iter().zip(&y0) {
        s += x * y.transpose();
    }
    let sv = s.singular_values();
    let scale_ref = sv.max().max(f64::MIN_POSITIVE);
    let mut sorted = [sv[0], sv[1], sv[2]];
    sorted.sort_by(|a, b| b.total_cmp(a));
    // fewer than three non-collinear points pins no rotation
    if var_x <= 1e-24 || sorted[1] <= 1e-12 * scale_ref {
        return (xs.iter().map(|p| p - mx + my).collect(), true);
    }
    let (sxx, sxy, sxz) = (s[(0, 0)], s[(0, 1)], s[(0, 2)]);
    let (syx, syy, syz) = (s[(1, 0)], s[(1, 1)], s[(1, 2)]);
    let (szx, szy, szz) = (s[(2, 0)], s[(2, 1)], s[(2, 2)]);
    #[rustfmt::skip]
    let n = Matrix4::new(
        sxx + syy + szz, syz - szy,        szx - sxz,        sxy - syx,
        syz - szy,       sxx - syy - szz,  sxy + syx,        szx + sxz,
        szx - sxz,       sxy + syx,        -sxx + syy - szz, syz + szy,
        sxy - syx,       szx + sxz,        syz + szy,        -sxx - syy + szz,
    );
    let eig = SymmetricEigen::new(n);
    let q = eig.eigenvectors.column(eig.eigenvalues.imax()).into_owned();
    let rot = UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix();
    let rotated: Vec<_> = x0.iter().map(|p| rot * p).collect();
    let scale = rotated.iter().zip(&y0).map(|(r, y)| r.dot(y)).sum::<f64>() / var_x;
    (rotated.iter().map(|r| scale * r + my).collect(), false)
}

/// Percentage of joints with error strictly below `threshold_mm`.
pub fn pck(pred: &PoseSeq3D, gt: &PoseSeq3D, threshold_mm: f64) -> Result<f64> {
    if !(threshold_mm > 0.0) {
        return Err(Error::invalid("PCK threshold must be > 0"));
    }
    Ok(pck_from_errors(&joint_errors(pred, gt)?, threshold_mm))
}

pub fn pck_from_errors(errors: &[f64], threshold_mm: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|&&e| e < threshold_mm).count() as f64 / errors.len() as f64
}

/// Mean PCK over 31 thresholds evenly spaced on `[0, 150]` mm.
pub fn auc(pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<f64> {
    Ok(auc_from_errors(&joint_errors(pred, gt)?))
}

pub fn auc_from_errors(errors: &[f64]) -> f64 {
    let step = PCK_THRESHOLD_MM / (AUC_THRESHOLDS - 1) as f64;
    (0..AUC_THRESHOLDS).map(|i| pck_from_errors(errors, i as f64 * step)).sum::<f64>() / AUC_THRESHOLDS as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreErrorStudy {
    pub pearson_r: f64,
    pub ols_slope: f64,
    pub ols_intercept: f64,
    pub ols_r2: f64,
    pub pairs: usize,
}

/// Pearson correlation and OLS of error on score over `(score, error)` pairs.
pub fn score_error_study(pairs: &[(f64, f64)]) -> Result<ScoreErrorStudy> {
    if pairs.len() < 3 {
        return Err(Error::invalid(format!("score/error study needs >= 3 pairs, got {}", pairs.len())));
    }
    if pairs.iter().any(|(s, e)| !s.is_finite() || !e.is_finite()) {
        return Err(Error::NonFinite("score/error pairs"));
    }
    let n = pairs.len() as f64;
    let ms = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let me = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sss, mut see, mut sse) = (0.0, 0.0, 0.0);
    for &(s, e) in pairs {
        sss += (s - ms) * (s - ms);
        see += (e - me) * (e - me);
        sse += (s - ms) * (e - me);
    }
    if sss <= 0.0 {
        return Err(Error::ZeroVariance("conformity scores"));
    }
    if see <= 0.0 {
        return Err(Error::ZeroVariance("hypothesis errors"));
    }
    let r = (sse / (sss * see).sqrt()).clamp(-1.0, 1.0);
    let slope = sse / sss;
    Ok(ScoreErrorStudy { pearson_r: r, ols_slope: slope, ols_intercept: me - slope * ms, ols_r2: r * r, pairs: pairs.len() })
}

/// Evaluation summary. Coverage is a fraction, PCK and AUC are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mpjpe_mm: f64,
    pub p_mpjpe_mm: f64,
    pub pck_percent: f64,
    pub auc_percent: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub pearson_r: f64,
    pub ols_r2: f64,
    pub sample_count: usize,
}

pub const CSV_HEADER: &str = "mpjpe_mm,p_mpjpe_mm,pck_percent,auc_percent,coverage,mean_set_size,pearson_r,ols_r2,sample_count";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.mpjpe_mm,
            self.p_mpjpe_mm,
            self.pck_percent,
            self.auc_percent,
            self.coverage,
            self.mean_set_size,
            self.pearson_r,
            self.ols_r2,
            self.sample_count
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Running accumulator of pose metrics over many samples.
#[derive(Debug, Default, Clone)]
pub struct PoseMetricsAccumulator {
    errors: Vec<f64>,
    aligned_sum: f64,
    aligned_count: usize,
    pub samples: usize,
}

impl PoseMetricsAccumulator {
    pub fn push(&mut self, pred: &PoseSeq3D, gt: &PoseSeq3D) -> Result<()> {
        let e = joint_errors(pred, gt)?;
        let p = p_mpjpe(pred, gt)?;
        self.aligned_sum += p * e.len() as f64;
        self.aligned_count += e.len();
        self.errors.extend(e);
        self.samples += 1;
        Ok(())
    }

    pub fn mpjpe(&self) -> f64 {
        mean(&self.errors).unwrap_or(f64::NAN)
    }

    pub fn p_mpjpe(&self) -> f64 {
        if self.aligned_count == 0 {
            return f64::NAN;
        }
        self.aligned_sum / self.aligned_count as f64
    }

    pub fn pck(&self) -> f64 {
        pck_from_errors(&self.errors, PCK_THRESHOLD_MM)
    }

    pub fn auc(&self) -> f64 {
        auc_from_errors(&self.errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offsets(errs: &[f64]) -> (PoseSeq3D, PoseSeq3D) {
        let gt = PoseSeq3D::zeros(1, errs.len());
        let pred = PoseSeq3D::new(1, errs.len(), errs.iter().flat_map(|&e| [e, 0.0, 0.0]).collect()).unwrap();
        (pred, gt)
    }

    #[test]
    fn mpjpe_examples() {
        let gt = PoseSeq3D::zeros(2, 3);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let pred = PoseSeq3D::new(2, 3, [3.0, 0.0, 4.0].repeat(6)).unwrap();
        assert_eq!(mpjpe(&pred, &gt).unwrap(), 5.0);
        assert!(mpjpe(&pred, &PoseSeq3D::zeros(1, 3)).is_err());
    }

    #[test]
    fn pck_and_auc_examples() {
        let (p, g) = offsets(&[100.0, 200.0]);
        assert_eq!(pck(&p, &g, 150.0).unwrap(), 50.0);
        let (p, g) = offsets(&[100.0, 140.0, 160.0]);
        assert!((pck(&p, &g, 150.0).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        let (p, g) = offsets(&[0.0, 0.0]);
        assert_eq!(pck(&p, &g, 150.0).unwrap(), 100.0);
        assert!((auc(&p, &g).unwrap() - 3000.0 / 31.0).abs() < 1e-12);
        let (p, g) = offsets(&[151.0, 400.0]);
        assert_eq!(auc(&p, &g).unwrap(), 0.0);
        let (p, g) = offsets(&[75.0]);
        // thresholds 80..=150 are strictly above 75: 15 of 31
        assert!((auc(&p, &g).unwrap() - 1500.0 / 31.0).abs() < 1e-12);
    }

    #[test]
    fn study_examples() {
        let anti: Vec<(f64, f64)> = (0..6).map(|i| (i as f64, 10.0 - 2.0 * i as f64)).collect();
        let s = score_error_study(&anti).unwrap();
        assert!((s.pearson_r + 1.0).abs() < 1e-12);
        assert!((s.ols_r2 - 1.0).abs() < 1e-12);
        assert!((s.ols_slope + 2.0).abs() < 1e-12);
        assert!((s.ols_intercept - 10.0).abs() < 1e-12);
        assert!(matches!(score_error_study(&[(0.5, 1.0), (0.5, 2.0), (0.5, 3.0)]), Err(Error::ZeroVariance(_))));
    }

    #[test]
    fn csv_has_fixed_header() {
        let r = MetricsReport {
            mpjpe_mm: 1.0,
            p_mpjpe_mm: 0.5,
            pck_percent: 100.0,
            auc_percent: 90.0,
            coverage: 0.9,
            mean_set_size: 3.0,
            pearson_r: -0.4,
            ols_r2: 0.16,
            sample_count: 7,
        };
        let csv = r.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next().unwrap().split(',').count(), 9);
    }
}
