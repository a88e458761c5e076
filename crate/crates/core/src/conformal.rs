//! Conformal prediction over conformity scores (higher = more conforming).
//!
//! Training uses a smooth relaxation: pairwise-sigmoid soft ranks select a
//! soft lower quantile `tau` of the calibration half of the hypotheses, and
//! sigmoid memberships of the prediction half give a differentiable set size.
//! Inference uses ordinary split conformal prediction: `tau` is the
//! `floor(alpha * (n + 1))`-th smallest calibration score and the set keeps
//! every hypothesis scoring at least `tau`.

use serde::{Deserialize, Serialize};

use crate::aggregate::HypothesisBatch;
use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SoftCPConfig {
    /// Miscoverage level; the target coverage is `1 - alpha`.
    pub alpha: f64,
    pub eta_sig: f64,
    pub eta_rank: f64,
    pub kappa: f64,
    pub size_eps: f64,
}

impl Default for SoftCPConfig {
    fn default() -> Self {
        Self { alpha: 0.1, eta_sig: 0.1, eta_rank: 0.1, kappa: 1.0, size_eps: 1e-8 }
    }
}

impl SoftCPConfig {
    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.eta_sig > 0.0 && self.eta_rank > 0.0) {
            return Err(Error::invalid("soft CP temperatures must be > 0"));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::invalid("kappa must be >= 0"));
        }
        if !(self.size_eps > 0.0) {
            return Err(Error::invalid("size_eps must be > 0"));
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// 1-based order statistic `floor(alpha * (n + 1))`, clamped to `[1, n]`.
pub fn quantile_rank(n: usize, alpha: f64) -> usize {
    let k = (alpha * (n as f64 + 1.0)).floor() as usize;
    k.clamp(1, n.max(1))
}

/// Calibrated split-conformal threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub tau: f64,
    pub alpha: f64,
    pub n_cal: usize,
    /// Calibration scores, ascending.
    pub scores: Vec<f64>,
}

impl CalibrationResult {
    pub fn calibrate(scores: &[f64], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        if scores.is_empty() {
            return Err(Error::Empty("calibration set"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("calibration scores"));
        }
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let k = quantile_rank(sorted.len(), alpha);
        Ok(Self { tau: sorted[k - 1], alpha, n_cal: sorted.len(), scores: sorted })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s)?;
        if c.scores.len() != c.n_cal {
            return Err(Error::invalid("calibration n_cal disagrees with score count"));
        }
        Ok(c)
    }
}

pub fn hard_quantile_tau(cal_scores: &[f64], alpha: f64) -> Result<f64> {
    Ok(CalibrationResult::calibrate(cal_scores, alpha)?.tau)
}

/// Differentiable lower quantile of `scores` (`[n]`, `n >= 2`).
///
/// Soft ranks `r_i = 1 + sum_{j != i} sigmoid((s_i - s_j) / eta_rank)` are
/// compared with the target order statistic `k = floor(alpha (n + 1))`
/// (clamped to `[1, n]`), and `tau = sum_i softmax(-(r_i - k)^2 / eta_rank)_i s_i`.
pub fn soft_quantile_tau(tape: &mut Tape, scores: Var, cfg: &SoftCPConfig) -> Result<Var> {
    let shape = tape.shape(scores).to_vec();
    if shape.len() != 1 || shape[0] < 2 {
        return Err(Error::invalid(format!("soft quantile needs at least 2 scores, got shape {shape:?}")));
    }
    let n = shape[0];
    let rows = tape.reshape(scores, &[n, 1])?;
    let rows = tape.expand(rows, &[n, n])?;
    let cols = tape.reshape(scores, &[1, n])?;
    let cols = tape.expand(cols, &[n, n])?;
    let diff = tape.sub(rows, cols)?;
    let diff = tape.scale(diff, 1.0 / cfg.eta_rank)?;
    let cmp = tape.sigmoid(diff)?;
    let ranks = tape.sum_axis(cmp, 1)?;
    // the diagonal contributed sigmoid(0) = 0.5
    let ranks = tape.add_scalar(ranks, 0.5)?;

    let target = quantile_rank(n, cfg.alpha) as f64;
    let off = tape.add_scalar(ranks, -target)?;
    let off = tape.square(off)?;
    let logits = tape.scale(off, -1.0 / cfg.eta_rank)?;
    let peak = tape.value(logits).iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = tape.add_scalar(logits, -peak)?;
    let e = tape.exp(shifted)?;
    let z = tape.sum(e)?;
    let w = tape.div(e, z)?;
    let weighted = tape.mul(w, scores)?;
    Ok(tape.sum(weighted)?)
}

/// `sigmoid((score - tau) / eta_sig)`; `score` may be any shape, `tau` scalar.
pub fn soft_assignment(tape: &mut Tape, score: Var, tau: Var, eta_sig: f64) -> Result<Var> {
    if !(eta_sig > 0.0) {
        return Err(Error::invalid("eta_sig must be > 0"));
    }
    let d = tape.sub(score, tau)?;
    let d = tape.scale(d, 1.0 / eta_sig)?;
    Ok(tape.sigmoid(d)?)
}

/// `max(sum(memberships) - kappa, 0)`.
pub fn inefficiency(tape: &mut Tape, memberships: Var, kappa: f64) -> Result<Var> {
    let s = tape.sum(memberships)?;
    let s = tape.add_scalar(s, -kappa)?;
    Ok(tape.max_scalar(s, 0.0)?)
}

/// `log(mean(omegas) + size_eps)` over a batch `[B]`.
pub fn size_loss(tape: &mut Tape, omegas: Var, size_eps: f64) -> Result<Var> {
    if tape.value(omegas).is_empty() {
        return Err(Error::Empty("inefficiency batch"));
    }
    let m = tape.mean(omegas)?;
    let m = tape.add_scalar(m, size_eps)?;
    Ok(tape.log(m)?)
}

/// Per-sample inefficiency: calibrate a soft `tau` on the first half of the
/// hypothesis scores and measure the soft set size of the second half.
pub fn sample_inefficiency(tape: &mut Tape, hyp_scores: Var, cfg: &SoftCPConfig) -> Result<Var> {
    let shape = tape.shape(hyp_scores).to_vec();
    if shape.len() != 1 || shape[0] < 4 || !shape[0].is_multiple_of(2) {
        return Err(Error::invalid(format!("training hypotheses must be an even count >= 4, got shape {shape:?}")));
    }
    let half = shape[0] / 2;
    let cal = tape.slice(hyp_scores, 0, 0, half)?;
    let pred = tape.slice(hyp_scores, 0, half, 2 * half)?;
    let tau = soft_quantile_tau(tape, cal, cfg)?;
    let member = soft_assignment(tape, pred, tau, cfg.eta_sig)?;
    inefficiency(tape, member, cfg.kappa)
}

/// Set-size loss over a batch: one `[H_train]` score vector per sample.
pub fn train_step_cp(tape: &mut Tape, per_sample_scores: &[Var], cfg: &SoftCPConfig) -> Result<Var> {
    if per_sample_scores.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut omegas = Vec::with_capacity(per_sample_scores.len());
    for &s in per_sample_scores {
        let o = sample_inefficiency(tape, s, cfg)?;
        omegas.push(tape.reshape(o, &[1])?);
    }
    let omegas = tape.concat_last(&omegas)?;
    size_loss(tape, omegas, cfg.size_eps)
}

/// Result of filtering one hypothesis batch with a calibrated threshold.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    pub batch: HypothesisBatch,
    /// Indices of the retained hypotheses in the input batch.
    pub kept: Vec<usize>,
    /// No hypothesis reached `tau`; the single best one was kept instead.
    pub fallback: bool,
}

/// Keep the hypotheses with score `>= tau`; if none qualify keep the highest
/// scoring one (lowest index on ties) and flag it.
pub fn predict_set(batch: &HypothesisBatch, calib: &CalibrationResult) -> Result<PredictionSet> {
    if batch.is_empty() {
        return Err(Error::Empty("hypothesis batch"));
    }
    let scores = batch.scores.as_ref().ok_or_else(|| Error::invalid("prediction sets need hypothesis scores"))?;
    let mut kept: Vec<usize> = (0..scores.len()).filter(|&h| scores[h] >= calib.tau).collect();
    let fallback = kept.is_empty();
    if fallback {
        let mut best = 0;
        for h in 1..scores.len() {
            if scores[h] > scores[best] {
                best = h;
            }
        }
        kept.push(best);
    }
    Ok(PredictionSet { batch: batch.select(&kept), kept, fallback })
}

/// Fraction of `(ground-truth score, tau)` pairs with score `>= tau`.
pub fn empirical_coverage(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Empty("coverage pairs"));
    }
    let hit = pairs.iter().filter(|(s, tau)| s >= tau).count();
    Ok(hit as f64 / pairs.len() as f64)
}
