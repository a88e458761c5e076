use conflift::diffusion::DiffusionSchedule;
use conflift::pose::{PoseSeq2D, PoseSeq3D};
use conflift::posenet::DenoiserConfig;
use conflift::synthkin::{make_splits, GeneratorConfig};
use conflift::trainer::*;
use conflift::{posenet, scorer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        h_train: 4,
        batch_size: 3,
        lr: 1e-3,
        epochs: 2,
        diffusion_steps: 50,
        model: DenoiserConfig { frames: 2, joints: 8, embed_dim: 8, spatial_layers: 1, temporal_layers: 1, hidden_mult: 1 },
        ..Default::default()
    }
}

fn tiny_data(count: usize) -> Vec<(PoseSeq2D, PoseSeq3D)> {
    let g = GeneratorConfig { count: count.max(10), frames: 2, cal_fraction: 0.1, test_fraction: 0.0, ..Default::default() };
    let d = make_splits(&g, 3).unwrap();
    d.all().take(count).map(|s| (s.x.clone(), s.y.clone())).collect()
}

fn pairs(d: &[(PoseSeq2D, PoseSeq3D)]) -> Vec<(&PoseSeq2D, &PoseSeq3D)> {
    d.iter().map(|(x, y)| (x, y)).collect()
}

#[test]
fn adamw_matches_a_hand_computed_trace() {
    let cfg = AdamConfig { lr: 0.1, beta1: 0.99, beta2: 0.99, eps: 1e-8, weight_decay: 0.1 };
    let mut p = vec![0.5];
    let mut state = AdamState::zeros(&[1]);
    let expected = [0.39600000329999985, 0.4432881845525325, 0.4467267765708772];
    for (g, want) in [0.3, -1.2, 0.7].into_iter().zip(expected) {
        assert!(adam_step(&mut [p.as_mut_slice()], &[vec![g]], &mut state, &cfg).unwrap());
        assert!((p[0] - want).abs() < 1e-14, "{} vs {want}", p[0]);
    }
    assert_eq!(state.t, 3);
}

#[test]
fn adamw_skips_non_finite_gradients() {
    let cfg = AdamConfig { lr: 0.1, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
    let mut p = vec![1.0, 2.0];
    let mut state = AdamState::zeros(&[2]);
    assert!(!adam_step(&mut [p.as_mut_slice()], &[vec![0.1, f64::NAN]], &mut state, &cfg).unwrap());
    assert_eq!(p, vec![1.0, 2.0]);
    assert_eq!(state, AdamState::zeros(&[2]));
}

fn graph_for(cfg: &TrainConfig, data: &[(PoseSeq2D, PoseSeq3D)]) -> (StepGraph, Vec<String>) {
    let t = Trainer::new(cfg.clone(), 11).unwrap();
    let sched = DiffusionSchedule::cosine(cfg.diffusion_steps, 0.0).unwrap();
    let per = cfg.model.frames * cfg.model.joints * 3;
    let noise = StepNoise::draw(&mut ChaCha8Rng::seed_from_u64(2), data.len(), per, cfg.h_train, sched.steps());
    let g = build_step_graph(&t.model.params, cfg, &sched, &pairs(data), &noise, true).unwrap();
    let names = t.model.params.names().map(str::to_string).collect();
    (g, names)
}

fn grads_of(g: &mut StepGraph, which: impl Fn(&CpTerms) -> conflift::ndgrad::Var) -> Vec<Vec<f64>> {
    let v = which(g.cp.as_ref().unwrap());
    let grads = g.tape.backward(v).unwrap();
    g.params.collect_grads(&g.tape, &grads)
}

fn touches(names: &[String], grads: &[Vec<f64>], prefix: &str) -> bool {
    names.iter().zip(grads).any(|(n, g)| n.starts_with(prefix) && g.iter().any(|v| *v != 0.0))
}

#[test]
fn loss_terms_reach_only_their_own_networks() {
    let cfg = tiny_cfg();
    let data = tiny_data(2);
    let (mut g, names) = graph_for(&cfg, &data);

    let adv = grads_of(&mut g, |c| c.l_adv);
    assert!(touches(&names, &adv, posenet::PREFIX));
    assert!(!touches(&names, &adv, scorer::PREFIX));

    let disc = grads_of(&mut g, |c| c.l_s);
    assert!(!touches(&names, &disc, posenet::PREFIX));
    assert!(touches(&names, &disc, scorer::PREFIX));

    let size = grads_of(&mut g, |c| c.l_size);
    assert!(touches(&names, &size, posenet::PREFIX));
    assert!(touches(&names, &size, scorer::PREFIX));

    let pose = g.tape.backward(g.l_pose).unwrap();
    let pose = g.params.collect_grads(&g.tape, &pose);
    assert!(touches(&names, &pose, posenet::PREFIX));
    assert!(!touches(&names, &pose, scorer::PREFIX));
}

#[test]
fn zero_lambda_reduces_the_objective_to_pose_plus_discriminator() {
    let cfg = TrainConfig { lambda: 0.0, ..tiny_cfg() };
    let data = tiny_data(2);
    let (mut g, _) = graph_for(&cfg, &data);
    let b = g.breakdown(0.0);
    assert_eq!(b.total, b.l_pose);
    let combined = g.gradients(0.0).unwrap();
    let cp = g.cp.as_ref().unwrap();
    let (l_pose, l_s) = (g.l_pose, cp.l_s);
    let sum = g.tape.add(l_pose, l_s).unwrap();
    let manual = g.tape.backward(sum).unwrap();
    let manual = g.params.collect_grads(&g.tape, &manual);
    for (a, m) in combined.iter().flatten().zip(manual.iter().flatten()) {
        assert!((a - m).abs() <= 1e-12 * m.abs().max(1.0));
    }
}

#[test]
fn weighted_objective_combines_the_terms() {
    let cfg = tiny_cfg();
    let data = tiny_data(3);
    let (g, _) = graph_for(&cfg, &data);
    let b = g.breakdown(0.6);
    assert!((b.total - (b.l_pose + 0.6 * (b.l_size + b.l_adv))).abs() < 1e-15);
    assert!(b.l_size.is_finite() && b.l_s > 0.0 && b.l_adv > 0.0);
}

#[test]
fn one_log_row_per_mini_batch() {
    let cfg = TrainConfig { epochs: 1, ..tiny_cfg() };
    let data = tiny_data(7);
    let mut t = Trainer::new(cfg, 1).unwrap();
    let mut log = Vec::new();
    let rows = t.fit(&pairs(&data), &mut log).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 3);
    assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![0, 1, 2]);
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let data = tiny_data(5);
    let run = |seed| {
        let mut t = Trainer::new(tiny_cfg(), seed).unwrap();
        let rows = t.fit(&pairs(&data), &mut std::io::sink()).unwrap();
        (t.model.params.iter().flat_map(|p| p.data.clone()).collect::<Vec<f64>>(), rows.iter().map(|r| r.l_pose).collect::<Vec<_>>())
    };
    let a = run(4);
    assert_eq!(a, run(4));
    assert_ne!(a.0, run(5).0);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(5);
    let train = pairs(&data);

    let mut straight = Trainer::new(TrainConfig { epochs: 3, ..tiny_cfg() }, 9).unwrap();
    straight.fit(&train, &mut std::io::sink()).unwrap();
    let full = dir.path().join("full.chmp");
    straight.save(&full).unwrap();

    let mut first = Trainer::new(TrainConfig { epochs: 1, ..tiny_cfg() }, 9).unwrap();
    first.fit(&train, &mut std::io::sink()).unwrap();
    let part = dir.path().join("part.chmp");
    first.save(&part).unwrap();

    let mut resumed = Trainer::resume(TrainConfig { epochs: 3, ..tiny_cfg() }, &part).unwrap();
    assert_eq!(resumed.epoch, 1);
    let rows = resumed.fit(&train, &mut std::io::sink()).unwrap();
    assert_eq!(rows.first().unwrap().epoch, 1);
    assert_eq!(rows.last().unwrap().epoch, 2);
    let again = dir.path().join("again.chmp");
    resumed.save(&again).unwrap();
    assert_eq!(std::fs::read(&full).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn overfits_a_single_sequence() {
    let cfg = TrainConfig { lr: 3e-3, weight_decay: 0.0, epochs: 2000, warm_start_epochs: 2000, plateau_factor: 1.0, ..tiny_cfg() };
    let data = tiny_data(1);
    let mut t = Trainer::new(cfg, 2).unwrap();
    let rows = t.fit(&pairs(&data), &mut std::io::sink()).unwrap();
    let tail: f64 = rows[rows.len() - 50..].iter().map(|r| r.l_pose).sum::<f64>() / 50.0;
    assert!(tail < 1e-3, "final l_pose {tail}");
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(TrainConfig { h_train: 5, ..tiny_cfg() }.validate().is_err());
    assert!(TrainConfig { k_train: 2, ..tiny_cfg() }.validate().is_err());
    assert!(TrainConfig { lambda: -1.0, ..tiny_cfg() }.validate().is_err());
    assert!(TrainConfig { beta1: 1.0, ..tiny_cfg() }.validate().is_err());
}
