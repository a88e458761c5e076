//! Keypoint sequence containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `N x J x 3` joint positions in millimeters, root-relative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSeq3D {
    pub frames: usize,
    pub joints: usize,
    pub coords: Vec<f64>,
}

/// `N x J x 2` observed keypoints in normalized image units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseSeq2D {
    pub frames: usize,
    pub joints: usize,
    pub coords: Vec<f64>,
}

fn check(frames: usize, joints: usize, dim: usize, coords: &[f64], what: &'static str) -> Result<()> {
    if coords.len() != frames * joints * dim {
        return Err(Error::ShapeMismatch { expected: format!("{frames}x{joints}x{dim}"), got: format!("{} values", coords.len()) });
    }
    if coords.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

impl PoseSeq3D {
    pub fn new(frames: usize, joints: usize, coords: Vec<f64>) -> Result<Self> {
        check(frames, joints, 3, &coords, "3D pose sequence")?;
        Ok(Self { frames, joints, coords })
    }

    pub fn zeros(frames: usize, joints: usize) -> Self {
        Self { frames, joints, coords: vec![0.0; frames * joints * 3] }
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 3] {
        let o = (frame * self.joints + joint) * 3;
        [self.coords[o], self.coords[o + 1], self.coords[o + 2]]
    }

    pub fn set_joint(&mut self, frame: usize, joint: usize, p: [f64; 3]) {
        let o = (frame * self.joints + joint) * 3;
        self.coords[o..o + 3].copy_from_slice(&p);
    }

    pub fn same_shape(&self, other: &PoseSeq3D) -> bool {
        self.frames == other.frames && self.joints == other.joints
    }

    pub fn ensure_same_shape(&self, other: &PoseSeq3D) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                expected: format!("{}x{}x3", self.frames, self.joints),
                got: format!("{}x{}x3", other.frames, other.joints),
            })
        }
    }

    /// Root joint at the origin in every frame (within `tol`).
    pub fn is_root_centered(&self, tol: f64) -> bool {
        (0..self.frames).all(|n| self.joint(n, 0).iter().all(|c| c.abs() <= tol))
    }

    pub fn scaled(&self, factor: f64) -> PoseSeq3D {
        PoseSeq3D { frames: self.frames, joints: self.joints, coords: self.coords.iter().map(|c| c * factor).collect() }
    }
}

impl PoseSeq2D {
    pub fn new(frames: usize, joints: usize, coords: Vec<f64>) -> Result<Self> {
        check(frames, joints, 2, &coords, "2D keypoint sequence")?;
        Ok(Self { frames, joints, coords })
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 2] {
        let o = (frame * self.joints + joint) * 2;
        [self.coords[o], self.coords[o + 1]]
    }
}
