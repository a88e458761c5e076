//! Learned conformity score and its least-squares adversarial losses.
//!
//! The score reuses the denoiser's input embedding of `[x | y]`, mean-pools it
//! over frames and joints, and maps the pooled vector through a small MLP
//! (`d -> 2d -> d -> 1`) with a sigmoid output.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndgrad::{BoundParams, ParamStore, Tape, Var};
use crate::pose::PoseSeq2D;
use crate::posenet::{self, DenoiserConfig};

pub const PREFIX: &str = "score.";

pub fn init_params<R: Rng>(embed_dim: usize, rng: &mut R) -> Result<ParamStore> {
    let d = embed_dim;
    let mut store = ParamStore::new();
    let mut layer = |store: &mut ParamStore, name: &str, rows: usize, cols: usize| -> Result<()> {
        let dist = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("finite std");
        store.insert(&format!("{PREFIX}{name}.w"), &[rows, cols], (0..rows * cols).map(|_| dist.sample(rng)).collect())?;
        store.insert(&format!("{PREFIX}{name}.b"), &[cols], vec![0.0; cols])?;
        Ok(())
    };
    layer(&mut store, "l1", d, 2 * d)?;
    layer(&mut store, "l2", 2 * d, d)?;
    layer(&mut store, "l3", d, 1)?;
    Ok(store)
}

/// Mean over frames and joints of the shared input embedding: `[B, d]`.
///
/// The embedding is affine in its input, so averaging `[x | y]` over frames
/// before embedding and over joints after it gives the same pooled vector as
/// embedding every token first.
pub fn pooled_embedding(tape: &mut Tape, params: &BoundParams, x: Var, y: Var) -> Result<Var> {
    let sx = tape.shape(x).to_vec();
    let sy = tape.shape(y).to_vec();
    if sx.len() != 4 || sy.len() != 4 || sx[..3] != sy[..3] {
        return Err(Error::ShapeMismatch { expected: "x [B,N,J,2] and y [B,N,J,3]".into(), got: format!("{sx:?} and {sy:?}") });
    }
    if tape.value(y).iter().chain(tape.value(x)).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conformity score input"));
    }
    let (bs, j) = (sx[0], sx[2]);
    let xm = tape.mean_axis(x, 1)?;
    let xm = tape.reshape(xm, &[bs, 1, j, 2])?;
    let ym = tape.mean_axis(y, 1)?;
    let ym = tape.reshape(ym, &[bs, 1, j, 3])?;
    let emb = posenet::embed_input(tape, params, xm, ym)?;
    let d = *tape.shape(emb).last().unwrap();
    let emb = tape.reshape(emb, &[bs, j, d])?;
    Ok(tape.mean_axis(emb, 1)?)
}

/// Score MLP on pooled embeddings `[B, d]` → scores `[B]` in (0, 1).
pub fn score_head(tape: &mut Tape, params: &BoundParams, pooled: Var) -> Result<Var> {
    let bs = tape.shape(pooled)[0];
    let mut h = pooled;
    for (i, name) in ["l1", "l2", "l3"].iter().enumerate() {
        let w = params.var(&format!("{PREFIX}{name}.w"))?;
        let b = params.var(&format!("{PREFIX}{name}.b"))?;
        h = tape.matmul(h, w)?;
        h = tape.add(h, b)?;
        if i < 2 {
            h = tape.relu(h)?;
        }
    }
    let s = tape.sigmoid(h)?;
    Ok(tape.reshape(s, &[bs])?)
}

/// Conformity scores `[B]` for candidate sequences `y` `[B, N, J, 3]`.
pub fn conformity_score(tape: &mut Tape, params: &BoundParams, x: Var, y: Var) -> Result<Var> {
    let pooled = pooled_embedding(tape, params, x, y)?;
    score_head(tape, params, pooled)
}

/// `(s_gt - 1)^2 + mean_h(s_h^2)`.
pub fn discriminator_loss(tape: &mut Tape, score_gt: Var, scores_hyp: Var) -> Result<Var> {
    if tape.value(scores_hyp).is_empty() {
        return Err(Error::Empty("hypothesis scores"));
    }
    let gt = tape.add_scalar(score_gt, -1.0)?;
    let gt = tape.square(gt)?;
    let gt = tape.mean(gt)?;
    let hyp = tape.square(scores_hyp)?;
    let hyp = tape.mean(hyp)?;
    Ok(tape.add(gt, hyp)?)
}

/// `mean_h((s_h - 1)^2)`.
pub fn adversarial_loss(tape: &mut Tape, scores_hyp: Var) -> Result<Var> {
    if tape.value(scores_hyp).is_empty() {
        return Err(Error::Empty("hypothesis scores"));
    }
    let d = tape.add_scalar(scores_hyp, -1.0)?;
    let d = tape.square(d)?;
    Ok(tape.mean(d)?)
}

pub fn discriminator_loss_value(score_gt: f64, scores_hyp: &[f64]) -> Result<f64> {
    if scores_hyp.is_empty() {
        return Err(Error::Empty("hypothesis scores"));
    }
    let hyp = scores_hyp.iter().map(|s| s * s).sum::<f64>() / scores_hyp.len() as f64;
    Ok((score_gt - 1.0).powi(2) + hyp)
}

pub fn adversarial_loss_value(scores_hyp: &[f64]) -> Result<f64> {
    if scores_hyp.is_empty() {
        return Err(Error::Empty("hypothesis scores"));
    }
    Ok(scores_hyp.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / scores_hyp.len() as f64)
}

/// The three views of the hypothesis scores a training step needs, each with
/// its own gradient routing.
pub struct ScoredBatch {
    /// Fully connected; feeds the set-size loss.
    pub live: Var,
    /// Score parameters frozen; feeds the adversarial loss.
    pub for_generator: Var,
    /// Embeddings frozen; feeds the discriminator loss.
    pub for_discriminator: Var,
    /// Ground-truth score with embeddings frozen.
    pub gt_for_discriminator: Var,
}

/// Scores candidate sequences `hyps` `[M, N, J, 3]` under conditioning
/// `x_hyps` `[M, N, J, 2]`, and ground truths `gt` `[B, N, J, 3]` under `x_gt`.
pub fn score_for_training(tape: &mut Tape, params: &BoundParams, x_hyps: Var, hyps: Var, x_gt: Var, gt: Var) -> Result<ScoredBatch> {
    let pooled = pooled_embedding(tape, params, x_hyps, hyps)?;
    let live = score_head(tape, params, pooled)?;
    let frozen = params.detached(tape)?;
    let for_generator = score_head(tape, &frozen, pooled)?;
    let pooled_detached = tape.detach(pooled)?;
    let for_discriminator = score_head(tape, params, pooled_detached)?;
    let pooled_gt = pooled_embedding(tape, params, x_gt, gt)?;
    let pooled_gt = tape.detach(pooled_gt)?;
    let gt_for_discriminator = score_head(tape, params, pooled_gt)?;
    Ok(ScoredBatch { live, for_generator, for_discriminator, gt_for_discriminator })
}

/// Value-only scores for a batch of candidate sequences (flat `[B, N, J, 3]`).
pub fn score_values(params: &ParamStore, cfg: &DenoiserConfig, x: &PoseSeq2D, ys: &[f64], batch: usize) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind_frozen(&mut tape)?;
    let y = tape.constant(&[batch, cfg.frames, cfg.joints, 3], ys.to_vec())?;
    let xv = posenet::conditioning(&mut tape, x, batch)?;
    let s = conformity_score(&mut tape, &bound, xv, y)?;
    Ok(tape.value(s).to_vec())
}
