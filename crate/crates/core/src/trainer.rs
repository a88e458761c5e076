//! Joint training of denoiser and scorer under
//! `L_pose + lambda * (L_size + L_adv)` plus the scorer's own `L_S`.
//!
//! A step builds one tape for the whole mini-batch. Gradient routing is done
//! by detachment inside the graph, so a single backward pass over the sum of
//! all four terms yields the denoiser gradient of
//! `L_pose + lambda (L_size + L_adv)` and the scorer gradient of
//! `L_S + lambda L_size`; each goes to its own AdamW optimizer.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{sample_inefficiency, size_loss, SoftCPConfig};
use crate::diffusion::{forward_diffuse, DiffusionSchedule};
use crate::error::{Error, Result};
use crate::model::{Model, MM_PER_UNIT};
use crate::ndgrad::{BoundParams, ParamStore, Tape, Var};
use crate::pose::{PoseSeq2D, PoseSeq3D};
use crate::posenet::{self, DenoiserConfig};
use crate::rng::{normal_vec, substream};
use crate::scorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub h_train: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub epochs: usize,
    /// Epochs of pose-only training before the scorer and CP terms start.
    pub warm_start_epochs: usize,
    pub diffusion_steps: usize,
    pub k_train: usize,
    pub cp: SoftCPConfig,
    pub model: DenoiserConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            h_train: 20,
            batch_size: 8,
            lr: 5e-5,
            beta1: 0.99,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.1,
            plateau_factor: 0.5,
            plateau_patience: 10,
            epochs: 30,
            warm_start_epochs: 0,
            diffusion_steps: 999,
            k_train: 1,
            cp: SoftCPConfig::default(),
            model: DenoiserConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be >= 0"));
        }
        if self.h_train < 4 || !self.h_train.is_multiple_of(2) {
            return Err(Error::invalid(format!("h_train must be even and >= 4, got {}", self.h_train)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("lr and adam_eps must be > 0, weight_decay >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::invalid("plateau_factor must lie in (0, 1]"));
        }
        if self.diffusion_steps == 0 {
            return Err(Error::invalid("diffusion_steps must be >= 1"));
        }
        if self.k_train != 1 {
            return Err(Error::invalid("training supports single-step DDIM hypotheses only (k_train = 1)"));
        }
        self.cp.validate()?;
        self.model.validate()
    }
}

/// AdamW with bias correction; weight decay is applied after the adaptive
/// step as `p -= lr * wd * p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn zeros(shapes: &[usize]) -> Self {
        Self { t: 0, m: shapes.iter().map(|&n| vec![0.0; n]).collect(), v: shapes.iter().map(|&n| vec![0.0; n]).collect() }
    }
}

/// One AdamW update of `params` in place. Returns `false` and leaves
/// everything untouched when any gradient is non-finite.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[Vec<f64>], state: &mut AdamState, cfg: &AdamConfig) -> Result<bool> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::invalid("parameter, gradient and state counts differ"));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.len() != g.len() {
            return Err(Error::invalid("gradient length differs from its parameter"));
        }
    }
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        log::warn!("non-finite gradient; optimizer step skipped");
        return Ok(false);
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            let g = grads[i][k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
            p[k] -= cfg.lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + cfg.eps);
            p[k] -= cfg.lr * cfg.weight_decay * p[k];
        }
    }
    Ok(true)
}

/// Loss components of one step, in model units (meters).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pose: f64,
    pub l_size: f64,
    pub l_adv: f64,
    pub l_s: f64,
    /// `l_pose + lambda (l_size + l_adv)`.
    pub total: f64,
}

/// Tape and loss handles for one mini-batch.
pub struct StepGraph {
    pub tape: Tape,
    pub params: BoundParams,
    pub l_pose: Var,
    /// Absent during warm-start epochs.
    pub cp: Option<CpTerms>,
}

pub struct CpTerms {
    pub l_size: Var,
    pub l_adv: Var,
    pub l_s: Var,
    pub omegas: Vec<Var>,
}

/// Random draws of one step: per sample a timestep and its noise, and
/// `H_train` starting noises.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub steps: Vec<usize>,
    pub eps: Vec<Vec<f64>>,
    pub starts: Vec<Vec<f64>>,
}

impl StepNoise {
    pub fn draw(rng: &mut ChaCha8Rng, batch: usize, per_seq: usize, h_train: usize, t_max: usize) -> Self {
        let mut steps = Vec::with_capacity(batch);
        let mut eps = Vec::with_capacity(batch);
        let mut starts = Vec::with_capacity(batch);
        for _ in 0..batch {
            steps.push(rng.gen_range(0..=t_max));
            eps.push(normal_vec(rng, per_seq));
            starts.push(normal_vec(rng, h_train * per_seq));
        }
        Self { steps, eps, starts }
    }
}

fn tile(xs: &[&PoseSeq2D], repeat: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for x in xs {
        for _ in 0..repeat {
            out.extend_from_slice(&x.coords);
        }
    }
    out
}

/// Build the full training graph for `batch` `(x, y0)` pairs (y0 in mm).
pub fn build_step_graph(
    params: &ParamStore,
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    batch: &[(&PoseSeq2D, &PoseSeq3D)],
    noise: &StepNoise,
    with_cp: bool,
) -> Result<StepGraph> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mc = &cfg.model;
    let (n, j) = (mc.frames, mc.joints);
    let per = n * j * 3;
    let bs = batch.len();
    for (x, y) in batch {
        if x.frames != n || x.joints != j || y.frames != n || y.joints != j {
            return Err(Error::ShapeMismatch {
                expected: format!("{n}x{j}"),
                got: format!("{}x{} / {}x{}", x.frames, x.joints, y.frames, y.joints),
            });
        }
    }
    let xs: Vec<&PoseSeq2D> = batch.iter().map(|(x, _)| *x).collect();
    let y0: Vec<f64> = batch.iter().flat_map(|(_, y)| y.coords.iter().map(|v| v / MM_PER_UNIT)).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape)?;

    let mut y_t = Vec::with_capacity(bs * per);
    for (b, chunk) in y0.chunks(per).enumerate() {
        y_t.extend(forward_diffuse(chunk, noise.steps[b], &noise.eps[b], sched)?);
    }
    let y_t = tape.constant(&[bs, n, j, 3], y_t)?;
    let x_b = tape.constant(&[bs, n, j, 2], tile(&xs, 1))?;
    let gt = tape.constant(&[bs, n, j, 3], y0)?;
    let y0_hat = posenet::denoise(&mut tape, &bound, mc, y_t, x_b, &noise.steps)?;
    let l_pose = posenet::pose_loss(&mut tape, y0_hat, gt)?;

    let cp = if with_cp {
        let h = cfg.h_train;
        let starts: Vec<f64> = noise.starts.iter().flatten().copied().collect();
        let starts = tape.constant(&[bs * h, n, j, 3], starts)?;
        let x_h = tape.constant(&[bs * h, n, j, 2], tile(&xs, h))?;
        let t_top = sched.steps();
        let hyps = posenet::denoise(&mut tape, &bound, mc, starts, x_h, &vec![t_top; bs * h])?;
        let scored = scorer::score_for_training(&mut tape, &bound, x_h, hyps, x_b, gt)?;
        let l_s = scorer::discriminator_loss(&mut tape, scored.gt_for_discriminator, scored.for_discriminator)?;
        let l_adv = scorer::adversarial_loss(&mut tape, scored.for_generator)?;
        let live = tape.reshape(scored.live, &[bs, h])?;
        let mut omegas = Vec::with_capacity(bs);
        let mut stacked = Vec::with_capacity(bs);
        for b in 0..bs {
            let row = tape.slice(live, 0, b, b + 1)?;
            let row = tape.reshape(row, &[h])?;
            let o = sample_inefficiency(&mut tape, row, &cfg.cp)?;
            omegas.push(o);
            stacked.push(tape.reshape(o, &[1])?);
        }
        let stacked = tape.concat_last(&stacked)?;
        let l_size = size_loss(&mut tape, stacked, cfg.cp.size_eps)?;
        Some(CpTerms { l_size, l_adv, l_s, omegas })
    } else {
        None
    };
    Ok(StepGraph { tape, params: bound, l_pose, cp })
}

impl StepGraph {
    pub fn breakdown(&self, lambda: f64) -> LossBreakdown {
        let l_pose = self.tape.item(self.l_pose);
        let (l_size, l_adv, l_s) = match &self.cp {
            Some(c) => (self.tape.item(c.l_size), self.tape.item(c.l_adv), self.tape.item(c.l_s)),
            None => (0.0, 0.0, 0.0),
        };
        LossBreakdown { l_pose, l_size, l_adv, l_s, total: if lambda == 0.0 { l_pose } else { l_pose + lambda * (l_size + l_adv) } }
    }

    /// Gradients of `L_pose + lambda (L_size + L_adv) + L_S`, in store order.
    pub fn gradients(&mut self, lambda: f64) -> Result<Vec<Vec<f64>>> {
        let mut loss = self.l_pose;
        if let Some(c) = &self.cp {
            let gen = self.tape.add(c.l_size, c.l_adv)?;
            let gen = self.tape.scale(gen, lambda)?;
            loss = self.tape.add(loss, gen)?;
            loss = self.tape.add(loss, c.l_s)?;
        }
        let grads = self.tape.backward(loss)?;
        Ok(self.params.collect_grads(&self.tape, &grads))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub l_pose: f64,
    pub l_size: f64,
    pub l_adv: f64,
    pub l_s: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub sched: DiffusionSchedule,
    pub model: Model,
    pub seed: u64,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    best: f64,
    bad_epochs: usize,
    den_idx: Vec<usize>,
    score_idx: Vec<usize>,
    den_opt: AdamState,
    score_opt: AdamState,
}

const TRAIN: &str = "train.";

impl Trainer {
    pub fn new(cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(&cfg.model, cfg.diffusion_steps, seed)?;
        Self::from_model(cfg, model, seed)
    }

    fn from_model(cfg: TrainConfig, model: Model, seed: u64) -> Result<Self> {
        let sched = DiffusionSchedule::cosine(cfg.diffusion_steps, 0.0)?;
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let den_idx: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with(posenet::PREFIX)).collect();
        let score_idx: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with(scorer::PREFIX)).collect();
        let sizes: Vec<usize> = model.params.iter().map(|p| p.data.len()).collect();
        let pick = |idx: &[usize]| idx.iter().map(|&i| sizes[i]).collect::<Vec<_>>();
        Ok(Self {
            lr: cfg.lr,
            den_opt: AdamState::zeros(&pick(&den_idx)),
            score_opt: AdamState::zeros(&pick(&score_idx)),
            den_idx,
            score_idx,
            cfg,
            sched,
            model,
            seed,
            epoch: 0,
            step: 0,
            best: f64::INFINITY,
            bad_epochs: 0,
        })
    }

    fn adam_cfg(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.adam_eps,
            weight_decay: self.cfg.weight_decay,
        }
    }

    fn uses_cp(&self) -> bool {
        self.epoch >= self.cfg.warm_start_epochs
    }

    /// One optimizer step on `batch`. A non-finite loss skips the update.
    pub fn train_step(&mut self, batch: &[(&PoseSeq2D, &PoseSeq3D)]) -> Result<LossBreakdown> {
        let mut rng = substream(self.seed, &format!("step-{}", self.step));
        let per = self.cfg.model.frames * self.cfg.model.joints * 3;
        let noise = StepNoise::draw(&mut rng, batch.len(), per, self.cfg.h_train, self.sched.steps());
        let mut graph = build_step_graph(&self.model.params, &self.cfg, &self.sched, batch, &noise, self.uses_cp())?;
        let losses = graph.breakdown(self.cfg.lambda);
        self.step += 1;
        if !(losses.total.is_finite() && losses.l_s.is_finite()) {
            log::warn!("step {}: non-finite loss {losses:?}; update skipped", self.step - 1);
            return Ok(losses);
        }
        let grads = graph.gradients(self.cfg.lambda)?;
        drop(graph);
        let acfg = self.adam_cfg();
        for (idx, opt) in [(&self.den_idx, &mut self.den_opt), (&self.score_idx, &mut self.score_opt)] {
            let g: Vec<Vec<f64>> = idx.iter().map(|&i| grads[i].clone()).collect();
            let mut all: Vec<&mut [f64]> = self.model.params.iter_mut().map(|p| p.data.as_mut_slice()).collect();
            let mut mine: Vec<&mut [f64]> = Vec::with_capacity(idx.len());
            // idx is ascending, so draining in reverse keeps positions valid
            for &i in idx.iter().rev() {
                mine.push(std::mem::take(&mut all[i]));
            }
            mine.reverse();
            adam_step(&mut mine, &g, opt, &acfg)?;
        }
        Ok(losses)
    }

    /// Run one epoch of shuffled mini-batches, appending a log row per step.
    pub fn run_epoch<W: Write>(&mut self, train: &[(&PoseSeq2D, &PoseSeq3D)], log_out: &mut W) -> Result<Vec<LogRow>> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut substream(self.seed, &format!("shuffle-{}", self.epoch)));
        let mut rows = Vec::new();
        let mut pose_sum = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let started = Instant::now();
            let batch: Vec<_> = chunk.iter().map(|&i| train[i]).collect();
            let lr = self.lr;
            let l = self.train_step(&batch)?;
            pose_sum += l.l_pose;
            let row = LogRow {
                epoch: self.epoch,
                step: self.step - 1,
                l_pose: l.l_pose,
                l_size: l.l_size,
                l_adv: l.l_adv,
                l_s: l.l_s,
                lr,
                wall_ms: started.elapsed().as_millis() as u64,
            };
            serde_json::to_writer(&mut *log_out, &row)?;
            log_out.write_all(b"\n")?;
            rows.push(row);
        }
        log_out.flush()?;
        let mean_pose = pose_sum / rows.len() as f64;
        log::info!("epoch {}: mean l_pose {mean_pose:.6}, lr {:.3e}", self.epoch, self.lr);
        self.plateau(mean_pose);
        self.epoch += 1;
        Ok(rows)
    }

    fn plateau(&mut self, metric: f64) {
        if metric < self.best {
            self.best = metric;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.cfg.plateau_patience {
                self.lr *= self.cfg.plateau_factor;
                self.bad_epochs = 0;
                log::info!("plateau: learning rate reduced to {:.3e}", self.lr);
            }
        }
    }

    /// Train until `cfg.epochs` epochs have completed in total.
    pub fn fit<W: Write>(&mut self, train: &[(&PoseSeq2D, &PoseSeq3D)], log_out: &mut W) -> Result<Vec<LogRow>> {
        let mut rows = Vec::new();
        while self.epoch < self.cfg.epochs {
            rows.extend(self.run_epoch(train, log_out)?);
        }
        Ok(rows)
    }

    /// Optimizer and schedule state under the `train.` prefix.
    pub fn state_store(&self) -> Result<ParamStore> {
        let mut s = ParamStore::new();
        let scalars = [
            ("seed_hi", (self.seed >> 32) as f64),
            ("seed_lo", (self.seed & 0xffff_ffff) as f64),
            ("epoch", self.epoch as f64),
            ("step", self.step as f64),
            ("lr", self.lr),
            ("best", self.best),
            ("bad_epochs", self.bad_epochs as f64),
            ("den_t", self.den_opt.t as f64),
            ("score_t", self.score_opt.t as f64),
        ];
        for (k, v) in scalars {
            s.insert(&format!("{TRAIN}{k}"), &[], vec![v])?;
        }
        let params: Vec<_> = self.model.params.iter().collect();
        for (idx, opt, tag) in [(&self.den_idx, &self.den_opt, "den"), (&self.score_idx, &self.score_opt, "score")] {
            for (slot, &i) in idx.iter().enumerate() {
                let p = params[i];
                s.insert(&format!("{TRAIN}{tag}.m.{}", p.name), &p.shape, opt.m[slot].clone())?;
                s.insert(&format!("{TRAIN}{tag}.v.{}", p.name), &p.shape, opt.v[slot].clone())?;
            }
        }
        Ok(s)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.model.save(path, &self.state_store()?)
    }

    /// Continue from a checkpoint written by [`Trainer::save`]. `cfg` may
    /// raise `epochs`; the model shape comes from the checkpoint.
    pub fn resume(mut cfg: TrainConfig, path: &std::path::Path) -> Result<Self> {
        let (model, rest) = Model::load(path)?;
        cfg.model = model.config.clone();
        cfg.diffusion_steps = model.steps;
        cfg.validate()?;
        let scalar = |k: &str| -> Result<f64> {
            rest.get(&format!("{TRAIN}{k}"))
                .map(|p| p.data[0])
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks training field {k}")))
        };
        let seed = ((scalar("seed_hi")? as u64) << 32) | scalar("seed_lo")? as u64;
        let mut t = Self::from_model(cfg, model, seed)?;
        t.epoch = scalar("epoch")? as usize;
        t.step = scalar("step")? as usize;
        t.lr = scalar("lr")?;
        t.best = scalar("best")?;
        t.bad_epochs = scalar("bad_epochs")? as usize;
        t.den_opt.t = scalar("den_t")? as u64;
        t.score_opt.t = scalar("score_t")? as u64;
        let names: Vec<String> = t.model.params.names().map(str::to_string).collect();
        for (idx, opt, tag) in [(&t.den_idx, &mut t.den_opt, "den"), (&t.score_idx, &mut t.score_opt, "score")] {
            for (slot, &i) in idx.iter().enumerate() {
                let get = |kind: &str| -> Result<Vec<f64>> {
                    rest.get(&format!("{TRAIN}{tag}.{kind}.{}", names[i]))
                        .map(|p| p.data.clone())
                        .ok_or_else(|| Error::invalid(format!("checkpoint lacks optimizer state for {}", names[i])))
                };
                opt.m[slot] = get("m")?;
                opt.v[slot] = get("v")?;
            }
        }
        Ok(t)
    }
}
