//! Cosine variance schedule, forward corruption and DDIM sampling.

use log::warn;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::pose::{PoseSeq2D, PoseSeq3D};
use crate::rng;

/// Offset of the squared-cosine schedule.
pub const COSINE_OFFSET: f64 = 0.008;
/// Upper clamp on per-step variances.
pub const MAX_BETA: f64 = 0.999;

/// Precomputed schedule coefficients indexed by step `0..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    beta: Vec<f64>,
    eta_ddim: f64,
}

impl DiffusionSchedule {
    /// Squared-cosine schedule: `alpha_bar(t) = f(t) / f(0)` with
    /// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
    pub fn cosine(steps: usize, eta_ddim: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::invalid("diffusion step count T must be at least 1"));
        }
        if !(eta_ddim >= 0.0) || !eta_ddim.is_finite() {
            return Err(Error::invalid(format!("eta_ddim must be >= 0, got {eta_ddim}")));
        }
        let f = |t: usize| {
            let phase = ((t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * std::f64::consts::FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let mut alpha_bar: Vec<f64> = (0..=steps).map(|t| f(t) / f0).collect();
        alpha_bar[0] = 1.0;
        let mut beta = vec![0.0; steps + 1];
        for t in 1..=steps {
            beta[t] = (1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(MAX_BETA);
        }
        Ok(Self { steps, alpha_bar, beta, eta_ddim })
    }

    /// Maximum step `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn eta_ddim(&self) -> f64 {
        self.eta_ddim
    }

    /// DDIM noise variance `eta * beta_t`.
    pub fn sigma_sq(&self, t: usize) -> f64 {
        self.eta_ddim * self.beta[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t > self.steps {
            return Err(Error::invalid(format!("diffusion step {t} outside [0, {}]", self.steps)));
        }
        Ok(())
    }
}

/// `sqrt(alpha_bar_t) * y0 + sqrt(1 - alpha_bar_t) * eps`, elementwise.
pub fn forward_diffuse(y0: &[f64], t: usize, eps: &[f64], sched: &DiffusionSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    if y0.len() != eps.len() {
        return Err(Error::ShapeMismatch { expected: format!("{} noise values", y0.len()), got: format!("{}", eps.len()) });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(y0.iter().zip(eps).map(|(y, e)| a * y + b * e).collect())
}

/// Step pairs `(t, t')` of a `K`-step DDIM trajectory from `T` down to 0.
pub fn ddim_timesteps(steps: usize, k_steps: usize) -> Vec<(usize, usize)> {
    let at = |k: usize| -> usize {
        let t = steps as f64 * (1.0 - k as f64 / k_steps as f64);
        (t.round().max(0.0) as usize).min(steps)
    };
    (0..k_steps)
        .map(|k| {
            let next = if k + 1 == k_steps { 0 } else { at(k + 1) };
            (at(k), next)
        })
        .collect()
}

/// Predicts clean samples for a batch of noisy sequences sharing one
/// conditioning input and one diffusion step.
pub trait Denoiser {
    /// `y_t` holds `batch` sequences back to back; returns the same layout.
    fn denoise_batch(&self, y_t: &[f64], batch: usize, x: &PoseSeq2D, t: usize) -> Result<Vec<f64>>;
}

impl<F> Denoiser for F
where
    F: Fn(&[f64], usize, &PoseSeq2D, usize) -> Result<Vec<f64>>,
{
    fn denoise_batch(&self, y_t: &[f64], batch: usize, x: &PoseSeq2D, t: usize) -> Result<Vec<f64>> {
        self(y_t, batch, x, t)
    }
}

/// DDIM from explicit starting noise. `chains[h]` drives the stochastic term
/// of chain `h`; with `eta_ddim = 0` it is never consulted.
pub fn ddim_sample_from<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &PoseSeq2D,
    y_start: Vec<f64>,
    batch: usize,
    k_steps: usize,
    sched: &DiffusionSchedule,
    chains: &mut [ChaCha8Rng],
) -> Result<Vec<f64>> {
    if k_steps == 0 {
        return Err(Error::invalid("DDIM needs at least one step"));
    }
    if batch == 0 || !y_start.len().is_multiple_of(batch) {
        return Err(Error::invalid(format!("{} values do not split into {batch} chains", y_start.len())));
    }
    let per_chain = y_start.len() / batch;
    let mut y = y_start;
    let mut y0_hat = Vec::new();
    let trajectory = ddim_timesteps(sched.steps(), k_steps);
    for (k, &(t, t_next)) in trajectory.iter().enumerate() {
        y0_hat = denoiser.denoise_batch(&y, batch, x, t)?;
        if y0_hat.len() != y.len() {
            return Err(Error::ShapeMismatch { expected: format!("{} denoised values", y.len()), got: format!("{}", y0_hat.len()) });
        }
        if k + 1 == trajectory.len() {
            break;
        }
        let ab = sched.alpha_bar(t);
        let ab_next = sched.alpha_bar(t_next);
        let mut sigma_sq = sched.sigma_sq(t);
        if 1.0 - ab_next - sigma_sq < 0.0 {
            warn!("DDIM step {t}->{t_next}: sigma^2 {sigma_sq:.3e} clamped to keep the radicand non-negative");
            sigma_sq = 1.0 - ab_next;
        }
        let sigma = sigma_sq.sqrt();
        let dir = (1.0 - ab_next - sigma_sq).max(0.0).sqrt();
        let inv_noise = 1.0 / (1.0 - ab).sqrt();
        let mut next = Vec::with_capacity(y.len());
        for h in 0..batch {
            let fresh = if sigma > 0.0 { rng::normal_vec(&mut chains[h], per_chain) } else { Vec::new() };
            for i in 0..per_chain {
                let j = h * per_chain + i;
                let eps_hat = (y[j] - ab.sqrt() * y0_hat[j]) * inv_noise;
                let mut v = ab_next.sqrt() * y0_hat[j] + dir * eps_hat;
                if sigma > 0.0 {
                    v += sigma * fresh[i];
                }
                next.push(v);
            }
        }
        y = next;
    }
    Ok(y0_hat)
}

/// Draws `batch` chains, chain `h` seeded with `seed + h`, starting from
/// standard normal noise, and runs `k_steps` DDIM steps.
pub fn ddim_sample_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &PoseSeq2D,
    batch: usize,
    k_steps: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<Vec<f64>> {
    let per_chain = x.frames * x.joints * 3;
    let mut chains: Vec<ChaCha8Rng> = (0..batch as u64).map(|h| rng::chain(seed, h)).collect();
    let mut start = Vec::with_capacity(batch * per_chain);
    for c in chains.iter_mut() {
        start.extend(rng::normal_vec(c, per_chain));
    }
    ddim_sample_from(denoiser, x, start, batch, k_steps, sched, &mut chains)
}

/// Single-chain sampler returning one 3D sequence in the denoiser's units.
pub fn ddim_sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    x: &PoseSeq2D,
    k_steps: usize,
    sched: &DiffusionSchedule,
    seed: u64,
) -> Result<PoseSeq3D> {
    let coords = ddim_sample_batch(denoiser, x, 1, k_steps, sched, seed)?;
    PoseSeq3D::new(x.frames, x.joints, coords)
}
