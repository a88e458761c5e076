//! Named gradient-check cases shared by the gradient tests and the
//! acceptance suite.

use conflift::conformal::{inefficiency, size_loss, soft_assignment, soft_quantile_tau, train_step_cp, SoftCPConfig};
use conflift::ndgrad::{BoundParams, ParamStore, Tape, Var};
use conflift::pose::PoseSeq2D;
use conflift::posenet::{self, DenoiserConfig};
use conflift::scorer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{away_from, check_gradient, rel_err, uniform, GradReport, Inputs, FD_STEP};

pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "square",
    "sqrt",
    "max_scalar",
    "matmul",
    "batch_matmul",
    "sum_axis",
    "mean_axis",
    "sum",
    "mean",
    "concat_last",
    "slice",
    "reshape",
    "permute",
    "expand",
    "soft_quantile_tau",
    "soft_assignment",
    "inefficiency",
    "size_loss",
    "train_step_cp",
    "discriminator_loss",
    "adversarial_loss",
    "denoiser",
    "scorer",
];

fn unary(seed: u64, data: Vec<f64>, f: impl Fn(&mut Tape, Var) -> Var) -> GradReport {
    let n = data.len();
    check_gradient(&vec![(vec![n], data)], &move |t: &mut Tape, v: &[Var]| f(t, v[0]), seed, None)
}

fn binary(seed: u64, a: (Vec<usize>, Vec<f64>), b: (Vec<usize>, Vec<f64>), f: impl Fn(&mut Tape, Var, Var) -> Var) -> GradReport {
    check_gradient(&vec![a, b], &move |t: &mut Tape, v: &[Var]| f(t, v[0], v[1]), seed, None)
}

pub fn tiny_denoiser() -> DenoiserConfig {
    DenoiserConfig { frames: 2, joints: 3, embed_dim: 8, spatial_layers: 1, temporal_layers: 1, hidden_mult: 2 }
}

/// Central-difference check over the entries of a parameter store.
pub fn check_params(store: &ParamStore, f: &dyn Fn(&mut Tape, &BoundParams) -> Var, seed: u64, coords: usize) -> GradReport {
    let value = |s: &ParamStore| {
        let mut tape = Tape::new();
        let b = s.bind(&mut tape).unwrap();
        let out = f(&mut tape, &b);
        tape.item(out)
    };
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape).unwrap();
    let out = f(&mut tape, &bound);
    let grads = tape.backward(out).unwrap();
    let analytic = bound.collect_grads(&tape, &grads);
    let sizes: Vec<usize> = store.iter().map(|p| p.data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.gen_range(0..sizes.len());
        let k = rng.gen_range(0..sizes[i]);
        let mut plus = store.clone();
        plus.iter_mut().nth(i).unwrap().data[k] += FD_STEP;
        let mut minus = store.clone();
        minus.iter_mut().nth(i).unwrap().data[k] -= FD_STEP;
        let numeric = (value(&plus) - value(&minus)) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic[i][k], numeric, 1e-7));
        max_abs = max_abs.max((analytic[i][k] - numeric).abs());
    }
    GradReport { max_rel, max_abs, checked: coords }
}

fn random_store(seed: u64, cfg: &DenoiserConfig) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = posenet::init_params(cfg, &mut rng).unwrap();
    store.extend(&scorer::init_params(cfg.embed_dim, &mut rng).unwrap()).unwrap();
    // non-zero biases so every path is exercised
    for p in store.iter_mut() {
        if p.name.ends_with(".b") {
            for v in &mut p.data {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    store
}

pub fn run(name: &str, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    match name {
        "add" => binary(seed, (vec![3, 4], uniform(r, 12, -2.0, 2.0)), (vec![4], uniform(r, 4, -2.0, 2.0)), |t, a, b| t.add(a, b).unwrap()),
        "sub" => {
            binary(seed, (vec![2, 3], uniform(r, 6, -2.0, 2.0)), (vec![2, 3], uniform(r, 6, -2.0, 2.0)), |t, a, b| t.sub(a, b).unwrap())
        }
        "mul" => binary(seed, (vec![3, 4], uniform(r, 12, -2.0, 2.0)), (vec![4], uniform(r, 4, -2.0, 2.0)), |t, a, b| t.mul(a, b).unwrap()),
        "div" => binary(seed, (vec![2, 3], uniform(r, 6, -2.0, 2.0)), (vec![2, 3], away_from(r, 6, -2.0, 2.0, 0.0, 0.5)), |t, a, b| {
            t.div(a, b).unwrap()
        }),
        "scale" => {
            let d = uniform(r, 5, -2.0, 2.0);
            unary(seed, d, |t, a| t.scale(a, -1.7).unwrap())
        }
        "add_scalar" => {
            let d = uniform(r, 5, -2.0, 2.0);
            unary(seed, d, |t, a| t.add_scalar(a, 0.3).unwrap())
        }
        "sigmoid" => {
            let d = uniform(r, 5, -2.0, 2.0);
            unary(seed, d, |t, a| t.sigmoid(a).unwrap())
        }
        "tanh" => {
            let d = uniform(r, 5, -2.0, 2.0);
            unary(seed, d, |t, a| t.tanh(a).unwrap())
        }
        "relu" => {
            let d = away_from(r, 6, -2.0, 2.0, 0.0, 1e-3);
            unary(seed, d, |t, a| t.relu(a).unwrap())
        }
        "exp" => {
            let d = uniform(r, 5, -2.0, 2.0);
            unary(seed, d, |t, a| t.exp(a).unwrap())
        }
        "log" => {
            let d = uniform(r, 5, 0.1, 2.0);
            unary(seed, d, |t, a| t.log(a).unwrap())
        }
        "square" => {
            let d = uniform(r, 5, -2.0, 2.0);
            unary(seed, d, |t, a| t.square(a).unwrap())
        }
        "sqrt" => {
            let d = uniform(r, 5, 0.1, 2.0);
            unary(seed, d, |t, a| t.sqrt(a).unwrap())
        }
        "max_scalar" => {
            let d = away_from(r, 6, -2.0, 2.0, 0.3, 1e-3);
            unary(seed, d, |t, a| t.max_scalar(a, 0.3).unwrap())
        }
        "matmul" => binary(seed, (vec![2, 3, 4], uniform(r, 24, -2.0, 2.0)), (vec![4, 5], uniform(r, 20, -2.0, 2.0)), |t, a, b| {
            t.matmul(a, b).unwrap()
        }),
        "batch_matmul" => {
            binary(seed, (vec![2, 3, 4], uniform(r, 24, -2.0, 2.0)), (vec![2, 4, 2], uniform(r, 16, -2.0, 2.0)), |t, a, b| {
                t.batch_matmul(a, b).unwrap()
            })
        }
        "sum_axis" | "mean_axis" | "sum" | "mean" | "reshape" | "permute" => {
            let inputs: Inputs = vec![(vec![2, 3, 4], uniform(r, 24, -2.0, 2.0))];
            let axis = r.gen_range(0..3);
            let op = name.to_string();
            check_gradient(
                &inputs,
                &move |t: &mut Tape, v: &[Var]| {
                    // square first so the reduction's gradient depends on the input
                    let x = t.square(v[0]).unwrap();
                    match op.as_str() {
                        "sum_axis" => t.sum_axis(x, axis).unwrap(),
                        "mean_axis" => t.mean_axis(x, axis).unwrap(),
                        "sum" => t.sum(x).unwrap(),
                        "mean" => t.mean(x).unwrap(),
                        "reshape" => t.reshape(x, &[4, 6]).unwrap(),
                        _ => t.permute(x, &[2, 0, 1]).unwrap(),
                    }
                },
                seed,
                None,
            )
        }
        "concat_last" => binary(seed, (vec![2, 3], uniform(r, 6, -2.0, 2.0)), (vec![2, 2], uniform(r, 4, -2.0, 2.0)), |t, a, b| {
            let c = t.concat_last(&[a, b]).unwrap();
            t.square(c).unwrap()
        }),
        "slice" => {
            let d = uniform(r, 12, -2.0, 2.0);
            check_gradient(
                &vec![(vec![3, 4], d)],
                &|t: &mut Tape, v: &[Var]| {
                    let s = t.slice(v[0], 1, 1, 3).unwrap();
                    t.square(s).unwrap()
                },
                seed,
                None,
            )
        }
        "expand" => {
            let d = uniform(r, 3, -2.0, 2.0);
            check_gradient(
                &vec![(vec![1, 3], d)],
                &|t: &mut Tape, v: &[Var]| {
                    let e = t.expand(v[0], &[4, 3]).unwrap();
                    t.square(e).unwrap()
                },
                seed,
                None,
            )
        }
        "soft_quantile_tau" => {
            let n = r.gen_range(2..12);
            let alpha = r.gen_range(0.05..0.5);
            let cfg = SoftCPConfig { alpha, ..Default::default() };
            let d = uniform(r, n, 0.0, 1.0);
            check_gradient(&vec![(vec![n], d)], &move |t: &mut Tape, v: &[Var]| soft_quantile_tau(t, v[0], &cfg).unwrap(), seed, None)
        }
        "soft_assignment" => binary(seed, (vec![5], uniform(r, 5, 0.0, 1.0)), (vec![], uniform(r, 1, 0.0, 1.0)), |t, s, tau| {
            soft_assignment(t, s, tau, 0.1).unwrap()
        }),
        "inefficiency" => {
            let d = loop {
                let d = uniform(r, 6, 0.0, 1.0);
                if (d.iter().sum::<f64>() - 1.0).abs() > 1e-3 {
                    break d;
                }
            };
            check_gradient(&vec![(vec![6], d)], &|t: &mut Tape, v: &[Var]| inefficiency(t, v[0], 1.0).unwrap(), seed, None)
        }
        "size_loss" => {
            let d = uniform(r, 4, 0.0, 3.0);
            check_gradient(&vec![(vec![4], d)], &|t: &mut Tape, v: &[Var]| size_loss(t, v[0], 1e-8).unwrap(), seed, None)
        }
        "train_step_cp" => {
            let cfg = SoftCPConfig { kappa: 0.5, ..Default::default() };
            let h = 2 * r.gen_range(2..6);
            let a = uniform(r, h, 0.0, 1.0);
            let b = uniform(r, h, 0.0, 1.0);
            check_gradient(
                &vec![(vec![h], a), (vec![h], b)],
                &move |t: &mut Tape, v: &[Var]| train_step_cp(t, v, &cfg).unwrap(),
                seed,
                None,
            )
        }
        "discriminator_loss" => binary(seed, (vec![1], uniform(r, 1, 0.01, 0.99)), (vec![5], uniform(r, 5, 0.01, 0.99)), |t, g, h| {
            scorer::discriminator_loss(t, g, h).unwrap()
        }),
        "adversarial_loss" => {
            let d = uniform(r, 5, 0.01, 0.99);
            check_gradient(&vec![(vec![5], d)], &|t: &mut Tape, v: &[Var]| scorer::adversarial_loss(t, v[0]).unwrap(), seed, None)
        }
        "denoiser" => {
            let cfg = tiny_denoiser();
            let store = random_store(seed, &cfg);
            let bs = 2;
            let y = uniform(r, bs * 2 * 3 * 3, -2.0, 2.0);
            let x = uniform(r, bs * 2 * 3 * 2, -1.0, 1.0);
            let steps: Vec<usize> = (0..bs).map(|_| r.gen_range(0..1000)).collect();
            check_params(
                &store,
                &move |t: &mut Tape, p: &BoundParams| {
                    let yv = t.constant(&[bs, 2, 3, 3], y.clone()).unwrap();
                    let xv = t.constant(&[bs, 2, 3, 2], x.clone()).unwrap();
                    let out = posenet::denoise(t, p, &cfg, yv, xv, &steps).unwrap();
                    let sq = t.square(out).unwrap();
                    t.mean(sq).unwrap()
                },
                seed,
                40,
            )
        }
        "scorer" => {
            let cfg = tiny_denoiser();
            let full = random_store(seed, &cfg);
            let mut store = full.filter_prefix("den.embed.");
            store.extend(&full.filter_prefix("score.")).unwrap();
            let x = PoseSeq2D::new(2, 3, uniform(r, 12, -1.0, 1.0)).unwrap();
            let y = uniform(r, 3 * 18, -2.0, 2.0);
            let w = uniform(r, 3, 0.5, 1.5);
            check_params(
                &store,
                &move |t: &mut Tape, p: &BoundParams| {
                    let yv = t.constant(&[3, 2, 3, 3], y.clone()).unwrap();
                    let xv = posenet::conditioning(t, &x, 3).unwrap();
                    let s = scorer::conformity_score(t, p, xv, yv).unwrap();
                    let wv = t.constant(&[3], w.clone()).unwrap();
                    let s = t.mul(s, wv).unwrap();
                    t.sum(s).unwrap()
                },
                seed,
                40,
            )
        }
        other => panic!("unknown gradient case {other}"),
    }
}
