//! Toy spatio-temporal denoiser `D(y_t, x, t) -> y0_hat`.
//!
//! Inputs are the per-joint concatenation `[x | y_t]` (5 channels), mapped by
//! a joint-specific linear embedding to `d` channels. A sinusoidal timestep
//! embedding is added to every token, followed by alternating spatial (across
//! joints) and temporal (across frames) residual mixing blocks and a linear
//! head back to 3 coordinates.
//!
//! All tensors use the layout `[batch, frames, joints, channels]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{BoundParams, ParamStore, Tape, Var};
use crate::pose::PoseSeq2D;

pub const INPUT_CHANNELS: usize = 5;
pub const PREFIX: &str = "den.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub frames: usize,
    pub joints: usize,
    pub embed_dim: usize,
    pub spatial_layers: usize,
    pub temporal_layers: usize,
    pub hidden_mult: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self { frames: 16, joints: 8, embed_dim: 64, spatial_layers: 2, temporal_layers: 2, hidden_mult: 2 }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 8 {
            return Err(Error::invalid(format!("embed_dim must be >= 8, got {}", self.embed_dim)));
        }
        if self.spatial_layers == 0 || self.temporal_layers == 0 || self.hidden_mult == 0 {
            return Err(Error::invalid("layer counts and hidden multiplier must be >= 1"));
        }
        if self.frames == 0 || self.joints == 0 {
            return Err(Error::invalid("frames and joints must be >= 1"));
        }
        Ok(())
    }

    fn tokens(&self) -> usize {
        self.frames * self.joints
    }
}

fn init_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, gain: f64) -> Vec<f64> {
    let std = gain / (rows as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..rows * cols).map(|_| dist.sample(rng)).collect()
}

fn spatial_name(i: usize) -> String {
    format!("{PREFIX}s{i}.")
}

fn temporal_name(i: usize) -> String {
    format!("{PREFIX}t{i}.")
}

fn insert_mixer<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, axis_len: usize, d: usize, mult: usize) -> Result<()> {
    let ha = axis_len * mult;
    let hd = d * mult;
    store.insert(&format!("{prefix}tok1.w"), &[axis_len, ha], init_matrix(rng, axis_len, ha, 1.0))?;
    store.insert(&format!("{prefix}tok1.b"), &[ha], vec![0.0; ha])?;
    store.insert(&format!("{prefix}tok2.w"), &[ha, axis_len], init_matrix(rng, ha, axis_len, 0.5))?;
    store.insert(&format!("{prefix}tok2.b"), &[axis_len], vec![0.0; axis_len])?;
    store.insert(&format!("{prefix}ch1.w"), &[d, hd], init_matrix(rng, d, hd, 1.0))?;
    store.insert(&format!("{prefix}ch1.b"), &[hd], vec![0.0; hd])?;
    store.insert(&format!("{prefix}ch2.w"), &[hd, d], init_matrix(rng, hd, d, 0.5))?;
    store.insert(&format!("{prefix}ch2.b"), &[d], vec![0.0; d])?;
    Ok(())
}

/// Fresh denoiser parameters under the `den.` prefix.
pub fn init_params<R: Rng>(cfg: &DenoiserConfig, rng: &mut R) -> Result<ParamStore> {
    cfg.validate()?;
    let (j, d) = (cfg.joints, cfg.embed_dim);
    let mut store = ParamStore::new();
    store.insert("den.embed.w", &[j, INPUT_CHANNELS, d], init_matrix(rng, INPUT_CHANNELS, j * d, 1.0))?;
    store.insert("den.embed.b", &[j, d], vec![0.0; j * d])?;
    store.insert("den.time.w", &[d, d], init_matrix(rng, d, d, 1.0))?;
    store.insert("den.time.b", &[d], vec![0.0; d])?;
    for i in 0..cfg.spatial_layers.max(cfg.temporal_layers) {
        if i < cfg.spatial_layers {
            insert_mixer(&mut store, rng, &spatial_name(i), cfg.joints, d, cfg.hidden_mult)?;
        }
        if i < cfg.temporal_layers {
            insert_mixer(&mut store, rng, &temporal_name(i), cfg.frames, d, cfg.hidden_mult)?;
        }
    }
    store.insert("den.head.w", &[d, 3], init_matrix(rng, d, 3, 0.5))?;
    store.insert("den.head.b", &[3], vec![0.0; 3])?;
    Ok(store)
}

/// Sinusoidal encoding of step `t` with 10000-base frequencies: first half
/// sines, second half cosines.
pub fn timestep_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    Ok(tape.add(h, b)?)
}

/// Tile a single conditioning sequence over `batch`: `[batch, N, J, 2]`.
pub fn conditioning(tape: &mut Tape, x: &PoseSeq2D, batch: usize) -> Result<Var> {
    let one = tape.constant(&[1, x.frames, x.joints, 2], x.coords.clone())?;
    Ok(tape.expand(one, &[batch, x.frames, x.joints, 2])?)
}

/// Joint-specific linear map of `[x | y]` to `d` channels.
///
/// `x`: `[B, N, J, 2]`, `y`: `[B, N, J, 3]` → `[B, N, J, d]`.
pub fn embed_input(tape: &mut Tape, params: &BoundParams, x: Var, y: Var) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sy = tape.shape(y).to_vec();
    if sx.len() != 4 || sy.len() != 4 || sx[..3] != sy[..3] || sx[3] != 2 || sy[3] != 3 {
        return Err(Error::ShapeMismatch { expected: "x [B,N,J,2] and y [B,N,J,3]".into(), got: format!("{sx:?} and {sy:?}") });
    }
    let w = params.var("den.embed.w")?;
    let b = params.var("den.embed.b")?;
    let wshape = tape.shape(w).to_vec();
    let (bs, n, j) = (sx[0], sx[1], sx[2]);
    if wshape[0] != j {
        return Err(Error::ShapeMismatch { expected: format!("{} joints", wshape[0]), got: format!("{j}") });
    }
    let d = wshape[2];
    let inp = tape.concat_last(&[x, y])?;
    let per_joint = tape.permute(inp, &[2, 0, 1, 3])?;
    let per_joint = tape.reshape(per_joint, &[j, bs * n, INPUT_CHANNELS])?;
    let emb = tape.batch_matmul(per_joint, w)?;
    let emb = tape.reshape(emb, &[j, bs, n, d])?;
    let emb = tape.permute(emb, &[1, 2, 0, 3])?;
    Ok(tape.add(emb, b)?)
}

/// Residual MLP across `axis` (1 = frames, 2 = joints) followed by a residual
/// channel MLP.
fn mixer(tape: &mut Tape, params: &BoundParams, prefix: &str, h: Var, axis: usize) -> Result<Var> {
    let p = |name: &str| params.var(&format!("{prefix}{name}"));
    // move the mixed axis last
    let (fwd, back): (&[usize], &[usize]) = if axis == 2 { (&[0, 1, 3, 2], &[0, 1, 3, 2]) } else { (&[0, 2, 3, 1], &[0, 3, 1, 2]) };
    let moved = tape.permute(h, fwd)?;
    let a = linear(tape, moved, p("tok1.w")?, p("tok1.b")?)?;
    let a = tape.relu(a)?;
    let m = linear(tape, a, p("tok2.w")?, p("tok2.b")?)?;
    let m = tape.permute(m, back)?;
    let h = tape.add(h, m)?;
    let c = linear(tape, h, p("ch1.w")?, p("ch1.b")?)?;
    let c = tape.relu(c)?;
    let c = linear(tape, c, p("ch2.w")?, p("ch2.b")?)?;
    Ok(tape.add(h, c)?)
}

/// Denoise a batch of noisy sequences `y_t` `[B, N, J, 3]` conditioned on `x`
/// `[B, N, J, 2]`, one diffusion step per batch element.
pub fn denoise(tape: &mut Tape, params: &BoundParams, cfg: &DenoiserConfig, y_t: Var, x: Var, steps: &[usize]) -> Result<Var> {
    let sy = tape.shape(y_t).to_vec();
    let expected = |b: usize| vec![b, cfg.frames, cfg.joints, 3];
    if sy.len() != 4 || sy != expected(sy[0]) {
        return Err(Error::ShapeMismatch { expected: format!("[B, {}, {}, 3]", cfg.frames, cfg.joints), got: format!("{sy:?}") });
    }
    let bs = sy[0];
    if steps.len() != bs {
        return Err(Error::invalid(format!("{} timesteps for batch of {bs}", steps.len())));
    }
    if tape.value(y_t).iter().chain(tape.value(x)).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("denoiser input"));
    }
    let d = cfg.embed_dim;
    let mut h = embed_input(tape, params, x, y_t)?;

    let enc: Vec<f64> = steps.iter().flat_map(|&t| timestep_encoding(t, d)).collect();
    let enc = tape.constant(&[bs, d], enc)?;
    let temb = linear(tape, enc, params.var("den.time.w")?, params.var("den.time.b")?)?;
    let temb = tape.reshape(temb, &[bs, 1, 1, d])?;
    let temb = tape.expand(temb, &[bs, cfg.frames, cfg.joints, d])?;
    h = tape.add(h, temb)?;

    for i in 0..cfg.spatial_layers.max(cfg.temporal_layers) {
        if i < cfg.spatial_layers {
            h = mixer(tape, params, &spatial_name(i), h, 2)?;
        }
        if i < cfg.temporal_layers {
            h = mixer(tape, params, &temporal_name(i), h, 1)?;
        }
    }
    linear(tape, h, params.var("den.head.w")?, params.var("den.head.b")?)
}

/// `||y0 - y0_hat||^2 / (N * J)`: squared error summed over coordinates and
/// averaged over every joint token (all leading axes count as tokens).
pub fn pose_loss(tape: &mut Tape, y0_hat: Var, y0: Var) -> Result<Var> {
    let s_hat = tape.shape(y0_hat).to_vec();
    let s_gt = tape.shape(y0).to_vec();
    if s_hat != s_gt || s_hat.len() < 3 || s_hat[s_hat.len() - 1] != 3 {
        return Err(Error::ShapeMismatch { expected: format!("{s_gt:?}"), got: format!("{s_hat:?}") });
    }
    let tokens = tape.value(y0).len() / 3;
    let diff = tape.sub(y0_hat, y0)?;
    let sq = tape.square(diff)?;
    let total = tape.sum(sq)?;
    Ok(tape.scale(total, 1.0 / tokens as f64)?)
}

/// Plain-value pose loss for one sequence.
pub fn pose_loss_value(y0_hat: &[f64], y0: &[f64], frames: usize, joints: usize) -> f64 {
    let s: f64 = y0_hat.iter().zip(y0).map(|(a, b)| (a - b).powi(2)).sum();
    s / (frames * joints) as f64
}

/// Value-only denoiser pass over a batch; the tape is discarded.
pub fn denoise_values(
    params: &ParamStore,
    cfg: &DenoiserConfig,
    y_t: &[f64],
    batch: usize,
    x: &PoseSeq2D,
    steps: &[usize],
) -> Result<Vec<f64>> {
    if x.frames != cfg.frames || x.joints != cfg.joints {
        return Err(Error::ShapeMismatch { expected: format!("{}x{}", cfg.frames, cfg.joints), got: format!("{}x{}", x.frames, x.joints) });
    }
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape)?;
    let y = tape.constant(&[batch, cfg.frames, cfg.joints, 3], y_t.to_vec())?;
    let xv = conditioning(&mut tape, x, batch)?;
    let out = denoise(&mut tape, &bound, cfg, y, xv, steps)?;
    Ok(tape.value(out).to_vec())
}

/// Tokens per sequence, exposed for callers sizing buffers.
pub fn tokens(cfg: &DenoiserConfig) -> usize {
    cfg.tokens()
}
