//! Collapsing a hypothesis set into one pose sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{PoseSeq2D, PoseSeq3D};

/// `H` hypotheses of one input, with optional conformity scores.
#[derive(Debug, Clone)]
pub struct HypothesisBatch {
    pub hypotheses: Vec<PoseSeq3D>,
    pub scores: Option<Vec<f64>>,
    pub source_x: Option<PoseSeq2D>,
}

impl HypothesisBatch {
    pub fn new(hypotheses: Vec<PoseSeq3D>, scores: Option<Vec<f64>>, source_x: Option<PoseSeq2D>) -> Result<Self> {
        let first = hypotheses.first().ok_or(Error::Empty("hypothesis batch"))?;
        for h in &hypotheses[1..] {
            first.ensure_same_shape(h)?;
        }
        if let Some(s) = &scores {
            if s.len() != hypotheses.len() {
                return Err(Error::ShapeMismatch { expected: format!("{} scores", hypotheses.len()), got: format!("{} scores", s.len()) });
            }
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("hypothesis scores"));
            }
        }
        if let Some(x) = &source_x {
            if x.frames != first.frames || x.joints != first.joints {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}x2", first.frames, first.joints),
                    got: format!("{}x{}x2", x.frames, x.joints),
                });
            }
        }
        Ok(Self { hypotheses, scores, source_x })
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn frames(&self) -> usize {
        self.hypotheses[0].frames
    }

    pub fn joints(&self) -> usize {
        self.hypotheses[0].joints
    }

    /// Sub-batch with the given hypothesis indices, in that order.
    pub fn select(&self, indices: &[usize]) -> HypothesisBatch {
        HypothesisBatch {
            hypotheses: indices.iter().map(|&i| self.hypotheses[i].clone()).collect(),
            scores: self.scores.as_ref().map(|s| indices.iter().map(|&i| s[i]).collect()),
            source_x: self.source_x.clone(),
        }
    }
}

/// Pinhole intrinsics in normalized image units. Root-relative poses sit
/// around depth zero, so `depth_offset_mm` is added to every depth before
/// projecting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub depth_offset_mm: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self { fx: 2.5, fy: 2.5, cx: 0.0, cy: 0.0, depth_offset_mm: 5000.0 }
    }
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("focal lengths must be > 0"));
        }
        if ![self.cx, self.cy, self.depth_offset_mm].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera intrinsics"));
        }
        Ok(())
    }

    /// Project one joint; `None` when its camera depth is not positive.
    pub fn project_point(&self, p: [f64; 3]) -> Option<[f64; 2]> {
        let z = p[2] + self.depth_offset_mm;
        if !(z > 0.0) {
            return None;
        }
        Some([self.fx * p[0] / z + self.cx, self.fy * p[1] / z + self.cy])
    }
}

pub fn project(pose: &PoseSeq3D, cam: &CameraIntrinsics) -> Result<PoseSeq2D> {
    let mut out = Vec::with_capacity(pose.frames * pose.joints * 2);
    for n in 0..pose.frames {
        for j in 0..pose.joints {
            let p = pose.joint(n, j);
            let uv = cam.project_point(p).ok_or(Error::Projection { frame: n, joint: j, depth: p[2] + cam.depth_offset_mm })?;
            out.extend_from_slice(&uv);
        }
    }
    PoseSeq2D::new(pose.frames, pose.joints, out)
}

pub fn plain_mean(batch: &HypothesisBatch) -> Result<PoseSeq3D> {
    let w = vec![1.0; batch.len()];
    mean_with(batch, &w)
}

/// Conformity-weighted mean `sum_h s_h y_h / sum_h s_h`.
pub fn weighted_mean(batch: &HypothesisBatch) -> Result<PoseSeq3D> {
    let scores = batch.scores.as_ref().ok_or_else(|| Error::invalid("weighted mean needs hypothesis scores"))?;
    if scores.iter().any(|&s| s < 0.0) {
        return Err(Error::invalid("aggregation weights must be >= 0"));
    }
    mean_with(batch, scores)
}

fn mean_with(batch: &HypothesisBatch, w: &[f64]) -> Result<PoseSeq3D> {
    if batch.is_empty() {
        return Err(Error::Empty("hypothesis batch"));
    }
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::DegenerateWeights);
    }
    let mut out = PoseSeq3D::zeros(batch.frames(), batch.joints());
    for (h, &wh) in batch.hypotheses.iter().zip(w) {
        if wh == 0.0 {
            continue;
        }
        for (o, c) in out.coords.iter_mut().zip(&h.coords) {
            *o += wh * c;
        }
    }
    for o in &mut out.coords {
        *o /= total;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct JAggOutcome {
    pub pose: PoseSeq3D,
    /// Joints where no hypothesis could be projected; those use the plain mean.
    pub fallback_joints: usize,
}

/// Per frame and joint, pick the hypothesis whose reprojection lands closest
/// to the observed keypoint (lowest index on ties).
pub fn j_agg(batch: &HypothesisBatch, cam: &CameraIntrinsics) -> Result<JAggOutcome> {
    if batch.is_empty() {
        return Err(Error::Empty("hypothesis batch"));
    }
    let x = batch.source_x.as_ref().ok_or_else(|| Error::invalid("J-Agg needs the conditioning 2D keypoints"))?;
    let mut pose = PoseSeq3D::zeros(batch.frames(), batch.joints());
    let mut fallback_joints = 0;
    for n in 0..batch.frames() {
        for j in 0..batch.joints() {
            let obs = x.joint(n, j);
            let mut best: Option<(usize, f64)> = None;
            for (h, hyp) in batch.hypotheses.iter().enumerate() {
                let Some(uv) = cam.project_point(hyp.joint(n, j)) else {
                    continue;
                };
                let d = (uv[0] - obs[0]).hypot(uv[1] - obs[1]);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((h, d));
                }
            }
            let p = match best {
                Some((h, _)) => batch.hypotheses[h].joint(n, j),
                None => {
                    fallback_joints += 1;
                    joint_mean(batch, n, j)
                }
            };
            pose.set_joint(n, j, p);
        }
    }
    if fallback_joints > 0 {
        log::warn!("J-Agg: {fallback_joints} joints had no projectable hypothesis; used the mean");
    }
    Ok(JAggOutcome { pose, fallback_joints })
}

fn joint_mean(batch: &HypothesisBatch, n: usize, j: usize) -> [f64; 3] {
    let mut acc = [0.0; 3];
    for h in &batch.hypotheses {
        let p = h.joint(n, j);
        for k in 0..3 {
            acc[k] += p[k];
        }
    }
    acc.map(|v| v / batch.len() as f64)
}

/// Oracle per-joint selection against the ground truth. Evaluation only.
pub fn j_best(batch: &HypothesisBatch, gt: &PoseSeq3D) -> Result<PoseSeq3D> {
    if batch.is_empty() {
        return Err(Error::Empty("hypothesis batch"));
    }
    batch.hypotheses[0].ensure_same_shape(gt)?;
    let mut pose = PoseSeq3D::zeros(gt.frames, gt.joints);
    for n in 0..gt.frames {
        for j in 0..gt.joints {
            let g = gt.joint(n, j);
            let mut best = (0, f64::INFINITY);
            for (h, hyp) in batch.hypotheses.iter().enumerate() {
                let d = dist3(hyp.joint(n, j), g);
                if d < best.1 {
                    best = (h, d);
                }
            }
            pose.set_joint(n, j, batch.hypotheses[best.0].joint(n, j));
        }
    }
    Ok(pose)
}

pub(crate) fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Aggregation modes exposed by the prediction pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationMode {
    /// Mean of all hypotheses.
    NaiveMean,
    /// Mean of the conformal set.
    CpMean,
    /// Score-weighted mean of the conformal set.
    CpWeightedMean,
    /// Reprojection J-Agg over the conformal set.
    CpJagg,
    /// Oracle J-Best over the conformal set.
    CpJbest,
    /// Reprojection J-Agg over all hypotheses.
    NaiveJagg,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 6] = [
        AggregationMode::NaiveMean,
        AggregationMode::CpMean,
        AggregationMode::CpWeightedMean,
        AggregationMode::CpJagg,
        AggregationMode::CpJbest,
        AggregationMode::NaiveJagg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AggregationMode::NaiveMean => "naive-mean",
            AggregationMode::CpMean => "cp-mean",
            AggregationMode::CpWeightedMean => "cp-weighted-mean",
            AggregationMode::CpJagg => "cp-jagg",
            AggregationMode::CpJbest => "cp-jbest",
            AggregationMode::NaiveJagg => "naive-jagg",
        }
    }

    pub fn uses_cp(self) -> bool {
        !matches!(self, AggregationMode::NaiveMean | AggregationMode::NaiveJagg)
    }

    pub fn is_oracle(self) -> bool {
        self == AggregationMode::CpJbest
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_hyp(v: f64) -> PoseSeq3D {
        PoseSeq3D::new(1, 1, vec![v; 3]).unwrap()
    }

    #[test]
    fn means() {
        let b = HypothesisBatch::new(vec![scalar_hyp(0.0), scalar_hyp(4.0)], Some(vec![0.25, 0.75]), None).unwrap();
        assert_eq!(weighted_mean(&b).unwrap().coords, vec![3.0; 3]);
        let b = HypothesisBatch::new(vec![scalar_hyp(1.0), scalar_hyp(2.0), scalar_hyp(6.0)], Some(vec![0.0; 3]), None).unwrap();
        assert_eq!(plain_mean(&b).unwrap().coords, vec![3.0; 3]);
        assert!(matches!(weighted_mean(&b), Err(Error::DegenerateWeights)));
        let b = HypothesisBatch::new(vec![scalar_hyp(1.5), scalar_hyp(9.0)], Some(vec![1.0, 0.0]), None).unwrap();
        assert_eq!(weighted_mean(&b).unwrap().coords, vec![1.5; 3]);
    }

    #[test]
    fn projection_examples() {
        let cam = CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, depth_offset_mm: 0.0 };
        assert_eq!(cam.project_point([2.0, 4.0, 2.0]), Some([1.0, 2.0]));
        let off = CameraIntrinsics { cx: 0.3, cy: -0.2, ..cam };
        assert_eq!(off.project_point([0.0, 0.0, 7.0]), Some([0.3, -0.2]));
        let bad = PoseSeq3D::new(1, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, -1.0]).unwrap();
        match project(&bad, &cam) {
            Err(Error::Projection { joint, .. }) => assert_eq!(joint, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mode_names_round_trip() {
        for m in AggregationMode::ALL {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(s, format!("\"{}\"", m.name()));
        }
    }
}
