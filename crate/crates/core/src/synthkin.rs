//! Synthetic articulated-skeleton sequences with pinhole observations.
//!
//! Every non-root joint swings its bone through two angles (about the
//! parent's x and z axes), each a sum of random-phase sinusoids inside the
//! motion family's frequency band. Forward kinematics keeps bone lengths
//! exact. Sequences get a random yaw and are root-centered.

use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use nalgebra::{Rotation3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aggregate::{project, CameraIntrinsics};
use crate::error::{Error, Result};
use crate::pose::{PoseSeq2D, PoseSeq3D};
use crate::rng::substream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionFamily {
    WalkLike,
    ReachLike,
    Idle,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 3] = [MotionFamily::WalkLike, MotionFamily::ReachLike, MotionFamily::Idle];

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::WalkLike => "walk-like",
            MotionFamily::ReachLike => "reach-like",
            MotionFamily::Idle => "idle",
        }
    }

    /// Angular frequency band in radians per frame.
    pub fn band(self) -> (f64, f64) {
        match self {
            MotionFamily::WalkLike => (0.2, 0.4),
            MotionFamily::ReachLike => (0.1, 0.25),
            MotionFamily::Idle => (0.02, 0.06),
        }
    }

    /// Peak swing in radians for (arm-like, leg-like) joints.
    fn amplitude(self) -> (f64, f64) {
        match self {
            MotionFamily::WalkLike => (0.35, 0.6),
            MotionFamily::ReachLike => (0.9, 0.15),
            MotionFamily::Idle => (0.08, 0.05),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSpec {
    /// Parent index per joint; the root is its own parent.
    pub parent: Vec<usize>,
    pub bone_length_mm: Vec<f64>,
    /// Bone direction at zero angles (camera axes, y pointing down).
    pub rest_dir: Vec<[f64; 3]>,
    /// Joints that swing with the arm amplitude; the rest use the leg one.
    pub upper_body: Vec<bool>,
    pub family: MotionFamily,
    /// Overrides the family's frequency band when set.
    pub band: Option<(f64, f64)>,
}

impl SkeletonSpec {
    /// Eight joints: pelvis, thorax, two hands, two knees, two feet.
    pub fn default_with(family: MotionFamily) -> Self {
        Self {
            parent: vec![0, 0, 1, 1, 0, 4, 0, 6],
            bone_length_mm: vec![0.0, 500.0, 600.0, 600.0, 450.0, 420.0, 450.0, 420.0],
            rest_dir: vec![
                [0.0, 0.0, 0.0],
                [0.0, -1.0, 0.0],
                [-0.86, 0.5, 0.1],
                [0.86, 0.5, 0.1],
                [-0.25, 0.97, 0.0],
                [0.0, 1.0, 0.0],
                [0.25, 0.97, 0.0],
                [0.0, 1.0, 0.0],
            ],
            upper_body: vec![false, true, true, true, false, false, false, false],
            family,
            band: None,
        }
    }

    pub fn joints(&self) -> usize {
        self.parent.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.parent.len();
        if j == 0 || self.parent[0] != 0 {
            return Err(Error::invalid("skeleton root must be joint 0 and its own parent"));
        }
        if self.bone_length_mm.len() != j || self.rest_dir.len() != j || self.upper_body.len() != j {
            return Err(Error::invalid("skeleton arrays must all have one entry per joint"));
        }
        for k in 1..j {
            // parents precede children, which also rules out cycles
            if self.parent[k] >= k {
                return Err(Error::invalid(format!("joint {k} must have a lower-index parent")));
            }
            if !(self.bone_length_mm[k] > 0.0) {
                return Err(Error::invalid(format!("bone length of joint {k} must be > 0")));
            }
            if Vector3::from(self.rest_dir[k]).norm() < 1e-9 {
                return Err(Error::invalid(format!("rest direction of joint {k} is zero")));
            }
        }
        if let Some((lo, hi)) = self.band {
            if !(lo > 0.0 && hi >= lo) {
                return Err(Error::invalid("frequency band must satisfy 0 < lo <= hi"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Wave {
    amp: f64,
    omega: f64,
    phase: f64,
}

/// Per-joint, per-axis sinusoid mixtures; `shared` pulls phases toward a
/// common value drawn from `global`.
fn draw_waves(spec: &SkeletonSpec, rng: &mut ChaCha8Rng, shared: f64, global: &mut ChaCha8Rng) -> Vec<[Vec<Wave>; 2]> {
    let (lo, hi) = spec.band.unwrap_or_else(|| spec.family.band());
    let (arm, leg) = spec.family.amplitude();
    (0..spec.joints())
        .map(|j| {
            let peak = if spec.upper_body[j] { arm } else { leg };
            let mut axis = || {
                let count = rng.gen_range(2..=3);
                (0..count)
                    .map(|_| {
                        let own: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        let common: f64 = global.gen_range(0.0..std::f64::consts::TAU);
                        Wave {
                            amp: peak * rng.gen_range(0.5..1.0) / count as f64,
                            omega: if hi > lo { rng.gen_range(lo..hi) } else { lo },
                            phase: (1.0 - shared) * own + shared * common,
                        }
                    })
                    .collect::<Vec<_>>()
            };
            [axis(), axis()]
        })
        .collect()
}

fn eval(waves: &[Wave], t: f64) -> f64 {
    waves.iter().map(|w| w.amp * (w.omega * t + w.phase).sin()).sum()
}

fn kinematics(spec: &SkeletonSpec, frames: usize, waves: &[[Vec<Wave>; 2]], yaw: f64) -> PoseSeq3D {
    let j_count = spec.joints();
    let mut out = PoseSeq3D::zeros(frames, j_count);
    let root = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
    for n in 0..frames {
        let t = n as f64;
        let mut frame_rot = vec![root; j_count];
        let mut pos = vec![Vector3::zeros(); j_count];
        for j in 1..j_count {
            let p = spec.parent[j];
            let local = Rotation3::from_axis_angle(&Vector3::z_axis(), eval(&waves[j][1], t))
                * Rotation3::from_axis_angle(&Vector3::x_axis(), eval(&waves[j][0], t));
            let rot = frame_rot[p] * local;
            let dir = Vector3::from(spec.rest_dir[j]).normalize();
            pos[j] = pos[p] + spec.bone_length_mm[j] * (rot * dir);
            frame_rot[j] = rot;
        }
        for (j, q) in pos.iter().enumerate() {
            out.set_joint(n, j, [q.x, q.y, q.z]);
        }
    }
    out
}

/// One root-centered sequence with exact bone lengths.
pub fn generate_sequence(spec: &SkeletonSpec, frames: usize, seed: u64) -> Result<PoseSeq3D> {
    generate_with_sharing(spec, frames, seed, 0.0, 0)
}

/// As [`generate_sequence`], with phases blended toward a stream keyed by
/// `shared_seed` by the fraction `shared_phase`.
pub fn generate_with_sharing(spec: &SkeletonSpec, frames: usize, seed: u64, shared_phase: f64, shared_seed: u64) -> Result<PoseSeq3D> {
    spec.validate()?;
    if frames == 0 {
        return Err(Error::invalid("sequence needs at least one frame"));
    }
    if !(0.0..=1.0).contains(&shared_phase) {
        return Err(Error::invalid("shared_phase must lie in [0, 1]"));
    }
    let mut rng = substream(seed, "sequence");
    let mut global = substream(shared_seed, "shared-phase");
    let waves = draw_waves(spec, &mut rng, shared_phase, &mut global);
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    Ok(kinematics(spec, frames, &waves, yaw))
}

/// Projection plus i.i.d. Gaussian noise of standard deviation `noise_std`.
pub fn observe_2d(y: &PoseSeq3D, cam: &CameraIntrinsics, noise_std: f64, seed: u64) -> Result<PoseSeq2D> {
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be >= 0"));
    }
    let mut x = project(y, cam)?;
    if noise_std > 0.0 {
        let mut rng = substream(seed, "observation");
        let normal = Normal::new(0.0, noise_std).map_err(|e| Error::invalid(e.to_string()))?;
        for c in &mut x.coords {
            *c += normal.sample(&mut rng);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub count: usize,
    pub frames: usize,
    pub cal_fraction: f64,
    pub test_fraction: f64,
    pub noise_std: f64,
    /// 0 gives exchangeable sequences; values toward 1 correlate phases.
    pub shared_phase: f64,
    pub families: Vec<MotionFamily>,
    pub camera: CameraIntrinsics,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            count: 512,
            frames: 16,
            cal_fraction: 0.02,
            test_fraction: 0.2,
            noise_std: 0.02,
            shared_phase: 0.0,
            families: MotionFamily::ALL.to_vec(),
            camera: CameraIntrinsics::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count < 10 {
            return Err(Error::invalid("dataset needs at least 10 sequences"));
        }
        if self.frames == 0 {
            return Err(Error::invalid("frames must be >= 1"));
        }
        if !(self.cal_fraction > 0.0 && self.cal_fraction < 0.5) {
            return Err(Error::invalid("cal_fraction must lie in (0, 0.5)"));
        }
        if !(self.test_fraction >= 0.0) || self.cal_fraction + self.test_fraction >= 1.0 {
            return Err(Error::invalid("calibration and test fractions must sum to < 1"));
        }
        if self.families.is_empty() {
            return Err(Error::invalid("at least one motion family is required"));
        }
        self.camera.validate()
    }

    /// (calibration, test) counts.
    pub fn split_counts(&self) -> (usize, usize) {
        let n = self.count as f64;
        let cal = ((n * self.cal_fraction).round() as usize).max(1);
        let test = (n * self.test_fraction).round() as usize;
        (cal, test.min(self.count - cal))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Calibration,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub split: SplitTag,
    pub family: MotionFamily,
    pub x: PoseSeq2D,
    pub y: PoseSeq3D,
    pub camera: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<Sample>,
    pub calibration: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn all(&self) -> impl Iterator<Item = &Sample> {
        self.train.iter().chain(&self.calibration).chain(&self.test)
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.calibration.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn sample_seed(seed: u64, id: usize) -> u64 {
    substream(seed, "data").gen::<u64>() ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn make_sample(cfg: &GeneratorConfig, seed: u64, id: usize, split: SplitTag) -> Result<Sample> {
    let s = sample_seed(seed, id);
    let mut pick = substream(s, "family");
    let family = cfg.families[pick.gen_range(0..cfg.families.len())];
    let spec = SkeletonSpec::default_with(family);
    let y = generate_with_sharing(&spec, cfg.frames, s, cfg.shared_phase, seed)?;
    let x = observe_2d(&y, &cfg.camera, cfg.noise_std, s)?;
    Ok(Sample { id, split, family, x, y, camera: cfg.camera })
}

/// Generate `cfg.count` sequences and partition their indices uniformly at
/// random into calibration, test and train.
pub fn make_splits(cfg: &GeneratorConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let (n_cal, n_test) = cfg.split_counts();
    let mut order: Vec<usize> = (0..cfg.count).collect();
    order.shuffle(&mut substream(seed, "split"));
    let mut tags = vec![SplitTag::Train; cfg.count];
    for &i in &order[..n_cal] {
        tags[i] = SplitTag::Calibration;
    }
    for &i in &order[n_cal..n_cal + n_test] {
        tags[i] = SplitTag::Test;
    }
    let samples: Vec<Sample> = {
        use rayon::prelude::*;
        (0..cfg.count).into_par_iter().map(|i| make_sample(cfg, seed, i, tags[i])).collect::<Result<_>>()?
    };
    Ok(collect_split(seed, samples))
}

fn collect_split(seed: u64, samples: Vec<Sample>) -> DatasetSplit {
    let mut split = DatasetSplit { seed, train: Vec::new(), calibration: Vec::new(), test: Vec::new() };
    for s in samples {
        match s.split {
            SplitTag::Train => split.train.push(s),
            SplitTag::Calibration => split.calibration.push(s),
            SplitTag::Test => split.test.push(s),
        }
    }
    split
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: usize,
    seed: u64,
    split: SplitTag,
    family: MotionFamily,
    frames: usize,
    joints: usize,
    x2d: String,
    y3d: String,
    camera: CameraIntrinsics,
}

pub fn encode_f64s(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_f64s(s: &str) -> Result<Vec<f64>> {
    let bytes = B64.decode(s).map_err(|e| Error::invalid(format!("bad base64 array: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::invalid("base64 array length is not a multiple of 8 bytes"));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// JSON-Lines, one record per sequence in id order.
pub fn write_dataset<W: Write>(mut w: W, data: &DatasetSplit) -> Result<()> {
    let mut all: Vec<&Sample> = data.all().collect();
    all.sort_by_key(|s| s.id);
    for s in all {
        let rec = Record {
            id: s.id,
            seed: data.seed,
            split: s.split,
            family: s.family,
            frames: s.y.frames,
            joints: s.y.joints,
            x2d: encode_f64s(&s.x.coords),
            y3d: encode_f64s(&s.y.coords),
            camera: s.camera,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<DatasetSplit> {
    let mut seed = None;
    let mut samples = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::invalid(format!("dataset line {}: {e}", lineno + 1)))?;
        if *seed.get_or_insert(rec.seed) != rec.seed {
            return Err(Error::invalid("dataset records disagree on the generation seed"));
        }
        samples.push(Sample {
            id: rec.id,
            split: rec.split,
            family: rec.family,
            x: PoseSeq2D::new(rec.frames, rec.joints, decode_f64s(&rec.x2d)?)?,
            y: PoseSeq3D::new(rec.frames, rec.joints, decode_f64s(&rec.y3d)?)?,
            camera: rec.camera,
        });
    }
    if samples.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(collect_split(seed.unwrap_or(0), samples))
}
