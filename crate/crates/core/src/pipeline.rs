//! Experiment configuration and the generate → train → calibrate → predict →
//! evaluate pipeline, with every artifact a file.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{j_agg, j_best, plain_mean, weighted_mean, AggregationMode, HypothesisBatch};
use crate::conformal::{predict_set, CalibrationResult};
use crate::diffusion::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::metrics::{mpjpe, score_error_study, MetricsReport, PoseMetricsAccumulator, ScoreErrorStudy, CSV_HEADER};
use crate::model::{sampling_seed, Model};
use crate::pose::PoseSeq3D;
use crate::synthkin::{self, decode_f64s, encode_f64s, DatasetSplit, GeneratorConfig, Sample};
use crate::trainer::{TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Hypotheses per input.
    pub h: usize,
    pub k_infer: usize,
    pub eta_ddim: f64,
    pub alpha: f64,
    pub aggregation: AggregationMode,
    /// Hypotheses denoised per batched call.
    pub chunk: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { h: 80, k_infer: 10, eta_ddim: 0.0, alpha: 0.1, aggregation: AggregationMode::CpWeightedMean, chunk: 20 }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.k_infer == 0 || self.chunk == 0 {
            return Err(Error::invalid("h, k_infer and chunk must be >= 1"));
        }
        if !(self.eta_ddim >= 0.0) {
            return Err(Error::invalid("eta_ddim must be >= 0"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Artifact file names, resolved against the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub checkpoint: PathBuf,
    pub train_log: PathBuf,
    pub calibration: PathBuf,
    pub predictions: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
    pub modes_csv: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "dataset.jsonl".into(),
            checkpoint: "model.chmp".into(),
            train_log: "train_log.jsonl".into(),
            calibration: "calibration.json".into(),
            predictions: "predictions.jsonl".into(),
            report_json: "report.json".into(),
            report_csv: "report.csv".into(),
            modes_csv: "report_modes.csv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Worker threads for per-sample inference; 0 uses all cores.
    pub jobs: usize,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.generator.validate())?;
        wrap(self.train.validate())?;
        wrap(self.inference.validate())?;
        if self.generator.frames != self.train.model.frames {
            return Err(Error::Config(format!(
                "generator frames ({}) differ from model frames ({})",
                self.generator.frames, self.train.model.frames
            )));
        }
        if self.train.model.joints != synthkin::SkeletonSpec::default_with(synthkin::MotionFamily::Idle).joints() {
            return Err(Error::Config("the synthetic skeleton has 8 joints; model.joints must match".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, steps: usize) -> Result<DiffusionSchedule> {
        DiffusionSchedule::cosine(steps, self.inference.eta_ddim)
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(jobs).build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Create `path` for writing unless it exists and `force` is off.
pub fn create_output(path: &Path, force: bool) -> Result<BufWriter<File>> {
    if path.exists() && !force {
        return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

pub fn open_input(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))
}

pub fn generate(cfg: &GeneratorConfig, seed: u64, out: &Path, force: bool) -> Result<DatasetSplit> {
    let data = synthkin::make_splits(cfg, seed)?;
    let mut w = create_output(out, force)?;
    synthkin::write_dataset(&mut w, &data)?;
    w.flush()?;
    Ok(data)
}

pub fn load_dataset(path: &Path) -> Result<DatasetSplit> {
    synthkin::read_dataset(open_input(path)?)
}

fn pairs(samples: &[Sample]) -> Vec<(&crate::pose::PoseSeq2D, &PoseSeq3D)> {
    samples.iter().map(|s| (&s.x, &s.y)).collect()
}

/// Train from scratch, or continue from `resume`, writing the checkpoint and
/// appending to the training log.
pub fn train(
    cfg: &TrainConfig,
    seed: u64,
    data: &DatasetSplit,
    checkpoint: &Path,
    log_path: &Path,
    resume: Option<&Path>,
    force: bool,
) -> Result<Trainer> {
    if data.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let mut trainer = match resume {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingInput(format!("{}", p.display())));
            }
            Trainer::resume(cfg.clone(), p)?
        }
        None => {
            if checkpoint.exists() && !force {
                return Err(Error::Config(format!("{} exists; pass --force to overwrite", checkpoint.display())));
            }
            Trainer::new(cfg.clone(), seed)?
        }
    };
    let mut log_out = if resume.is_some() {
        BufWriter::new(fs::OpenOptions::new().create(true).append(true).open(log_path)?)
    } else {
        create_output(log_path, true)?
    };
    let train = pairs(&data.train);
    trainer.fit(&train, &mut log_out)?;
    if !trainer.model.params.all_finite() {
        return Err(Error::Numerical("training produced non-finite parameters".into()));
    }
    trainer.save(checkpoint)?;
    Ok(trainer)
}

/// Split-conformal threshold from the conformity of the calibration
/// ground truths.
pub fn calibrate(model: &Model, samples: &[Sample], alpha: f64, jobs: usize) -> Result<CalibrationResult> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration split"));
    }
    let scores: Vec<f64> =
        pool(jobs)?.install(|| samples.par_iter().map(|s| Ok(model.score(&s.x, std::slice::from_ref(&s.y))?[0])).collect::<Result<_>>())?;
    CalibrationResult::calibrate(&scores, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: usize,
    pub family: synthkin::MotionFamily,
    pub h: usize,
    pub tau: Option<f64>,
    pub gt_score: f64,
    pub set_size: usize,
    pub fallback: bool,
    pub kept: Vec<usize>,
    pub scores: Vec<f64>,
    /// Per-hypothesis MPJPE against the ground truth, for the score study.
    pub hyp_mpjpe: Vec<f64>,
    /// Aggregated sequence per mode (base64 little-endian f64, mm).
    pub outputs: BTreeMap<String, String>,
}

impl PredictionRecord {
    pub fn output(&self, mode: AggregationMode, frames: usize, joints: usize) -> Result<Option<PoseSeq3D>> {
        match self.outputs.get(mode.name()) {
            Some(s) => Ok(Some(PoseSeq3D::new(frames, joints, decode_f64s(s)?)?)),
            None => Ok(None),
        }
    }
}

/// Everything the evaluation needs for one test sample.
pub fn predict_sample(
    model: &Model,
    sched: &DiffusionSchedule,
    inf: &InferenceConfig,
    calib: Option<&CalibrationResult>,
    sample: &Sample,
    seed: u64,
) -> Result<PredictionRecord> {
    let hyps = model.sample_hypotheses(&sample.x, inf.h, inf.k_infer, sched, sampling_seed(seed, sample.id), inf.chunk)?;
    let scores = model.score(&sample.x, &hyps)?;
    let gt_score = model.score(&sample.x, std::slice::from_ref(&sample.y))?[0];
    let hyp_mpjpe = hyps.iter().map(|h| mpjpe(h, &sample.y)).collect::<Result<Vec<_>>>()?;
    let batch = HypothesisBatch::new(hyps, Some(scores.clone()), Some(sample.x.clone()))?;
    let mut outputs = BTreeMap::new();
    let mut put = |mode: AggregationMode, p: PoseSeq3D| {
        outputs.insert(mode.name().to_string(), encode_f64s(&p.coords));
    };
    put(AggregationMode::NaiveMean, plain_mean(&batch)?);
    put(AggregationMode::NaiveJagg, j_agg(&batch, &sample.camera)?.pose);
    let (kept, fallback) = match calib {
        Some(c) => {
            let set = predict_set(&batch, c)?;
            put(AggregationMode::CpMean, plain_mean(&set.batch)?);
            put(AggregationMode::CpWeightedMean, weighted_mean(&set.batch)?);
            put(AggregationMode::CpJagg, j_agg(&set.batch, &sample.camera)?.pose);
            put(AggregationMode::CpJbest, j_best(&set.batch, &sample.y)?);
            (set.kept, set.fallback)
        }
        None => ((0..inf.h).collect(), false),
    };
    Ok(PredictionRecord {
        id: sample.id,
        family: sample.family,
        h: inf.h,
        tau: calib.map(|c| c.tau),
        gt_score,
        set_size: kept.len(),
        fallback,
        kept,
        scores,
        hyp_mpjpe,
        outputs,
    })
}

pub fn predict(
    model: &Model,
    inf: &InferenceConfig,
    calib: Option<&CalibrationResult>,
    samples: &[Sample],
    seed: u64,
    jobs: usize,
) -> Result<Vec<PredictionRecord>> {
    if calib.is_none() && inf.aggregation.uses_cp() {
        return Err(Error::MissingInput(format!("aggregation mode {} needs a calibration file", inf.aggregation.name())));
    }
    let sched = DiffusionSchedule::cosine(model.steps, inf.eta_ddim)?;
    pool(jobs)?.install(|| samples.par_iter().map(|s| predict_sample(model, &sched, inf, calib, s, seed)).collect())
}

pub fn write_predictions<W: Write>(mut w: W, records: &[PredictionRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::invalid(format!("predictions line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mode: AggregationMode,
    pub report: MetricsReport,
    pub modes: BTreeMap<String, MetricsReport>,
    pub study: ScoreErrorStudy,
    pub fallback_count: usize,
}

/// Metrics for every aggregation mode present in the predictions, with
/// `mode` as the headline report.
pub fn evaluate(records: &[PredictionRecord], data: &DatasetSplit, mode: AggregationMode) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let by_id: BTreeMap<usize, &Sample> = data.all().map(|s| (s.id, s)).collect();
    let mut accs: BTreeMap<String, (AggregationMode, PoseMetricsAccumulator)> = BTreeMap::new();
    let mut covered = 0usize;
    let mut with_tau = 0usize;
    let mut set_total = 0usize;
    let mut study_pairs = Vec::new();
    for r in records {
        let s = by_id.get(&r.id).ok_or_else(|| Error::MissingInput(format!("sample {} is not in the dataset", r.id)))?;
        for m in AggregationMode::ALL {
            if let Some(p) = r.output(m, s.y.frames, s.y.joints)? {
                accs.entry(m.name().to_string()).or_insert_with(|| (m, PoseMetricsAccumulator::default())).1.push(&p, &s.y)?;
            }
        }
        if let Some(tau) = r.tau {
            with_tau += 1;
            covered += usize::from(r.gt_score >= tau);
        }
        set_total += r.set_size;
        if r.scores.len() != r.hyp_mpjpe.len() {
            return Err(Error::invalid(format!("record {} has mismatched score/error lists", r.id)));
        }
        study_pairs.extend(r.scores.iter().copied().zip(r.hyp_mpjpe.iter().copied()));
    }
    let study = score_error_study(&study_pairs)?;
    let coverage = if with_tau > 0 { covered as f64 / with_tau as f64 } else { f64::NAN };
    let mean_set_size = set_total as f64 / records.len() as f64;
    let modes: BTreeMap<String, MetricsReport> = accs
        .into_iter()
        .map(|(name, (m, acc))| {
            let cp = m.uses_cp();
            let report = MetricsReport {
                mpjpe_mm: acc.mpjpe(),
                p_mpjpe_mm: acc.p_mpjpe(),
                pck_percent: acc.pck(),
                auc_percent: acc.auc(),
                coverage: if cp { coverage } else { 1.0 },
                mean_set_size: if cp { mean_set_size } else { records[0].h as f64 },
                pearson_r: study.pearson_r,
                ols_r2: study.ols_r2,
                sample_count: acc.samples,
            };
            (name, report)
        })
        .collect();
    let report = modes.get(mode.name()).cloned().ok_or_else(|| Error::MissingInput(format!("predictions lack mode {}", mode.name())))?;
    Ok(Evaluation { mode, report, modes, study, fallback_count: records.iter().filter(|r| r.fallback).count() })
}

impl Evaluation {
    pub fn modes_csv(&self) -> String {
        let mut s = format!("mode,{CSV_HEADER}\n");
        for (name, r) in &self.modes {
            s.push_str(&format!("{name},{}\n", r.csv_row()));
        }
        s
    }
}

/// Ablation grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Sweep {
    HTrain,
    HInfer,
    Lambda,
}

impl Sweep {
    pub fn grid(self) -> Vec<f64> {
        match self {
            Sweep::HTrain => vec![4.0, 8.0, 12.0, 16.0, 20.0],
            Sweep::HInfer => vec![1.0, 5.0, 10.0, 20.0, 40.0, 80.0],
            Sweep::Lambda => vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Sweep::HTrain => "h_train",
            Sweep::HInfer => "h_infer",
            Sweep::Lambda => "lambda",
        }
    }
}

/// Result of a full pipeline run in one directory.
pub struct RunOutcome {
    pub trainer: Trainer,
    pub calibration: CalibrationResult,
    pub predictions: Vec<PredictionRecord>,
    pub evaluation: Evaluation,
}

/// Train, calibrate, predict and evaluate on `data`, writing all artifacts
/// under `dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, data: &DatasetSplit, dir: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(dir)?;
    let p = &cfg.paths;
    let trainer = train(&cfg.train, cfg.seed, data, &dir.join(&p.checkpoint), &dir.join(&p.train_log), None, true)?;
    let (calibration, predictions, evaluation) = infer_and_evaluate(cfg, &trainer.model, data, dir)?;
    Ok(RunOutcome { trainer, calibration, predictions, evaluation })
}

/// Calibrate, predict and evaluate an already trained model.
pub fn infer_and_evaluate(
    cfg: &ExperimentConfig,
    model: &Model,
    data: &DatasetSplit,
    dir: &Path,
) -> Result<(CalibrationResult, Vec<PredictionRecord>, Evaluation)> {
    let p = &cfg.paths;
    let calibration = calibrate(model, &data.calibration, cfg.inference.alpha, cfg.jobs)?;
    fs::write(dir.join(&p.calibration), calibration.to_json()?)?;
    let predictions = predict(model, &cfg.inference, Some(&calibration), &data.test, cfg.seed, cfg.jobs)?;
    write_predictions(create_output(&dir.join(&p.predictions), true)?, &predictions)?;
    let evaluation = evaluate(&predictions, data, cfg.inference.aggregation)?;
    write_reports(&evaluation, dir, p)?;
    Ok((calibration, predictions, evaluation))
}

pub fn write_reports(ev: &Evaluation, dir: &Path, p: &PathsConfig) -> Result<()> {
    fs::write(dir.join(&p.report_json), serde_json::to_string_pretty(ev)?)?;
    fs::write(dir.join(&p.report_csv), ev.report.to_csv())?;
    fs::write(dir.join(&p.modes_csv), ev.modes_csv())?;
    Ok(())
}

/// One pipeline per grid point, in `dir/<sweep>-<value>/`; returns the
/// combined CSV (one row per point).
pub fn ablate(cfg: &ExperimentConfig, data: &DatasetSplit, sweep: Sweep, dir: &Path) -> Result<String> {
    let mut csv = format!("{},{CSV_HEADER}\n", sweep.name());
    let mut shared_model: Option<Model> = None;
    for v in sweep.grid() {
        let mut c = cfg.clone();
        let sub = dir.join(format!("{}-{v}", sweep.name()));
        fs::create_dir_all(&sub)?;
        let eval = match sweep {
            Sweep::HTrain => {
                c.train.h_train = v as usize;
                run_pipeline(&c, data, &sub)?.evaluation
            }
            Sweep::Lambda => {
                c.train.lambda = v;
                run_pipeline(&c, data, &sub)?.evaluation
            }
            Sweep::HInfer => {
                c.inference.h = v as usize;
                if shared_model.is_none() {
                    let p = &cfg.paths;
                    let t = train(&cfg.train, cfg.seed, data, &dir.join(&p.checkpoint), &dir.join(&p.train_log), None, true)?;
                    shared_model = Some(t.model);
                }
                infer_and_evaluate(&c, shared_model.as_ref().unwrap(), data, &sub)?.2
            }
        };
        csv.push_str(&format!("{v},{}\n", eval.report.csv_row()));
    }
    fs::write(dir.join(format!("ablate_{}.csv", sweep.name())), &csv)?;
    Ok(csv)
}
