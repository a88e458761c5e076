//! Trained denoiser + scorer bundle, checkpoint I/O and frozen inference.
//!
//! Networks work in meters; poses crossing this boundary are millimeters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::diffusion::{ddim_sample_batch, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::ndgrad::{read_checkpoint, write_checkpoint, ParamStore};
use crate::pose::{PoseSeq2D, PoseSeq3D};
use crate::posenet::{self, DenoiserConfig};
use crate::rng::substream;
use crate::scorer;

pub const MM_PER_UNIT: f64 = 1000.0;
const META: &str = "meta.";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: DenoiserConfig,
    /// Diffusion step count `T` the denoiser was trained with.
    pub steps: usize,
    /// `den.*` and `score.*` arrays.
    pub params: ParamStore,
}

impl Model {
    pub fn init(config: &DenoiserConfig, steps: usize, seed: u64) -> Result<Self> {
        let mut rng = substream(seed, "init");
        let mut params = posenet::init_params(config, &mut rng)?;
        params.extend(&scorer::init_params(config.embed_dim, &mut rng)?)?;
        Ok(Self { config: config.clone(), steps, params })
    }

    /// Model arrays plus `extra` (e.g. optimizer state) and config scalars.
    pub fn to_store(&self, extra: &ParamStore) -> Result<ParamStore> {
        let c = &self.config;
        let mut store = ParamStore::new();
        for (k, v) in [
            ("frames", c.frames),
            ("joints", c.joints),
            ("embed_dim", c.embed_dim),
            ("spatial_layers", c.spatial_layers),
            ("temporal_layers", c.temporal_layers),
            ("hidden_mult", c.hidden_mult),
            ("steps", self.steps),
        ] {
            store.insert(&format!("{META}model.{k}"), &[], vec![v as f64])?;
        }
        store.extend(&self.params)?;
        store.extend(extra)?;
        Ok(store)
    }

    /// Split a checkpoint store into the model and the remaining arrays.
    pub fn from_store(store: &ParamStore) -> Result<(Self, ParamStore)> {
        let get = |k: &str| -> Result<usize> {
            let p = store.get(&format!("{META}model.{k}")).ok_or_else(|| Error::invalid(format!("checkpoint lacks model field {k}")))?;
            Ok(p.data[0] as usize)
        };
        let config = DenoiserConfig {
            frames: get("frames")?,
            joints: get("joints")?,
            embed_dim: get("embed_dim")?,
            spatial_layers: get("spatial_layers")?,
            temporal_layers: get("temporal_layers")?,
            hidden_mult: get("hidden_mult")?,
        };
        config.validate()?;
        let mut params = store.filter_prefix(posenet::PREFIX);
        params.extend(&store.filter_prefix(scorer::PREFIX))?;
        let reference = Model::init(&config, 1, 0)?;
        for p in reference.params.iter() {
            match params.get(&p.name) {
                Some(q) if q.shape == p.shape => {}
                Some(q) => {
                    return Err(Error::ShapeMismatch { expected: format!("{} {:?}", p.name, p.shape), got: format!("{:?}", q.shape) })
                }
                None => return Err(Error::invalid(format!("checkpoint lacks {}", p.name))),
            }
        }
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint parameters"));
        }
        let mut rest = ParamStore::new();
        for p in store.iter() {
            if !p.name.starts_with(META) && params.get(&p.name).is_none() {
                rest.insert(&p.name, &p.shape, p.data.clone())?;
            }
        }
        let model = Self { config, steps: get("steps")?, params };
        Ok((model, rest))
    }

    pub fn save(&self, path: &Path, extra: &ParamStore) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_checkpoint(&mut w, &self.to_store(extra)?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, ParamStore)> {
        let store = read_checkpoint(BufReader::new(File::open(path)?))?;
        Self::from_store(&store)
    }

    fn check_input(&self, x: &PoseSeq2D) -> Result<()> {
        if x.frames != self.config.frames || x.joints != self.config.joints {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", self.config.frames, self.config.joints),
                got: format!("{}x{}", x.frames, x.joints),
            });
        }
        Ok(())
    }

    /// `count` hypotheses in millimeters; chain `h` is seeded `seed + h`.
    /// Chains run `chunk` at a time, which bounds memory without changing
    /// the result.
    pub fn sample_hypotheses(
        &self,
        x: &PoseSeq2D,
        count: usize,
        k_steps: usize,
        sched: &DiffusionSchedule,
        seed: u64,
        chunk: usize,
    ) -> Result<Vec<PoseSeq3D>> {
        self.check_input(x)?;
        if sched.steps() != self.steps {
            return Err(Error::invalid(format!("schedule has T={} but the model was trained with T={}", sched.steps(), self.steps)));
        }
        let denoise = |y: &[f64], b: usize, x: &PoseSeq2D, t: usize| -> Result<Vec<f64>> {
            posenet::denoise_values(&self.params, &self.config, y, b, x, &vec![t; b])
        };
        let per = x.frames * x.joints * 3;
        let mut out = Vec::with_capacity(count);
        let mut start = 0;
        while start < count {
            let b = chunk.max(1).min(count - start);
            let flat = ddim_sample_batch(&denoise, x, b, k_steps, sched, seed.wrapping_add(start as u64))?;
            for h in 0..b {
                let coords = flat[h * per..(h + 1) * per].iter().map(|v| v * MM_PER_UNIT).collect();
                out.push(PoseSeq3D::new(x.frames, x.joints, coords)?);
            }
            start += b;
        }
        Ok(out)
    }

    /// Conformity scores of sequences given in millimeters.
    pub fn score(&self, x: &PoseSeq2D, poses: &[PoseSeq3D]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if poses.is_empty() {
            return Ok(Vec::new());
        }
        let mut flat = Vec::with_capacity(poses.len() * x.frames * x.joints * 3);
        for p in poses {
            if p.frames != x.frames || p.joints != x.joints {
                return Err(Error::ShapeMismatch {
                    expected: format!("{}x{}x3", x.frames, x.joints),
                    got: format!("{}x{}x3", p.frames, p.joints),
                });
            }
            flat.extend(p.coords.iter().map(|v| v / MM_PER_UNIT));
        }
        scorer::score_values(&self.params, &self.config, x, &flat, poses.len())
    }
}

/// Base seed for the hypothesis chains of sample `id`: chains of different
/// samples never share a seed for `id < 2^32` and fewer than `2^20` chains.
pub fn sampling_seed(seed: u64, id: usize) -> u64 {
    substream(seed, "diffusion").gen::<u64>().wrapping_add((id as u64) << 20)
}
