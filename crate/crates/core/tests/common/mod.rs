#![allow(dead_code)]

use conflift::ndgrad::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

/// Inputs of one gradient case: shape and data per trainable leaf.
pub type Inputs = Vec<(Vec<usize>, Vec<f64>)>;

/// Builds a graph from trainable leaves and returns an output (any shape).
pub type Graph<'a> = dyn Fn(&mut Tape, &[Var]) -> Var + 'a;

/// Random projection weights so vector outputs reduce to a generic scalar.
fn reduce(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let n = tape.value(out).len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    let w = tape.constant(&shape, w).unwrap();
    let p = tape.mul(out, w).unwrap();
    tape.sum(p).unwrap()
}

fn eval(inputs: &Inputs, f: &Graph, seed: u64) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, d)| tape.var(s, d.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    let loss = reduce(&mut tape, out, seed);
    tape.item(loss)
}

/// Largest mismatch between analytic and central-difference gradients.
/// `coords` limits the checked coordinates per case (all when `None`).
#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    /// Largest raw `|analytic - numeric|`, floor or not.
    pub max_abs: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|)`, with differences below `abs_floor` counted as
/// exact (both sides are then zero to round-off).
pub fn rel_err(a: f64, n: f64, abs_floor: f64) -> f64 {
    let d = (a - n).abs();
    if d <= abs_floor {
        return 0.0;
    }
    d / a.abs().max(n.abs())
}

pub fn check_gradient(inputs: &Inputs, f: &Graph, seed: u64, coords: Option<usize>) -> GradReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|(s, d)| tape.var(s, d.clone()).unwrap()).collect();
    let out = f(&mut tape, &vars);
    let loss = reduce(&mut tape, out, seed);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().zip(inputs).map(|(&v, (_, d))| grads.get_or_zeros(v, d.len())).collect();

    let mut all: Vec<(usize, usize)> = inputs.iter().enumerate().flat_map(|(i, (_, d))| (0..d.len()).map(move |k| (i, k))).collect();
    if let Some(limit) = coords {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc0de);
        all = (0..limit.min(all.len())).map(|_| all[rng.gen_range(0..all.len())]).collect();
    }
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for &(i, k) in &all {
        let mut plus = inputs.clone();
        plus[i].1[k] += FD_STEP;
        let mut minus = inputs.clone();
        minus[i].1[k] -= FD_STEP;
        let numeric = (eval(&plus, f, seed) - eval(&minus, f, seed)) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic[i][k], numeric, 1e-7));
        max_abs = max_abs.max((analytic[i][k] - numeric).abs());
    }
    GradReport { max_rel, max_abs, checked: all.len() }
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Uniform draws in `[lo, hi]` kept at least `gap` away from `kink`.
pub fn away_from(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, kink: f64, gap: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let v = rng.gen_range(lo..hi);
            if (v - kink).abs() > gap {
                break v;
            }
        })
        .collect()
}

/// `n` scores in `[0, 1]` with every pairwise gap at least `gap`.
pub fn separated(rng: &mut ChaCha8Rng, n: usize, gap: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        if s.windows(2).all(|w| w[1] - w[0] >= gap) {
            return v;
        }
    }
}

pub mod grad_cases;
