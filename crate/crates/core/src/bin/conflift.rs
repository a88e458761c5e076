use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use conflift::aggregate::AggregationMode;
use conflift::conformal::CalibrationResult;
use conflift::model::Model;
use conflift::pipeline::{self, ExperimentConfig, Sweep};
use conflift::{Error, Result};

#[derive(Parser)]
#[command(name = "conflift", version, about = "Conformalized multi-hypothesis 3D pose lifting")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Directory holding every artifact.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    Generate {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        cal_fraction: Option<f64>,
        #[arg(long)]
        test_fraction: Option<f64>,
    },
    /// Train denoiser and scorer.
    Train {
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        h_train: Option<usize>,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Calibrate the conformal threshold.
    Calibrate {
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Sample, filter and aggregate hypotheses for the test split.
    Predict {
        #[arg(long)]
        h: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum)]
        mode: Option<AggregationMode>,
    },
    /// Compute metrics from predictions.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Option<AggregationMode>,
    },
    /// Run the pipeline across a sweep grid.
    Ablate {
        #[arg(long, value_enum)]
        sweep: Sweep,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Numerical(_) | Error::NonFinite(_) | Error::DegenerateWeights | Error::ZeroVariance(_) => 4,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(j) = common.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.display().to_string()))
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    let force = cli.common.force;
    match cli.cmd {
        Cmd::Generate { count, cal_fraction, test_fraction } => {
            let g = &mut cfg.generator;
            g.count = count.unwrap_or(g.count);
            g.cal_fraction = cal_fraction.unwrap_or(g.cal_fraction);
            g.test_fraction = test_fraction.unwrap_or(g.test_fraction);
            g.validate().map_err(|e| Error::Config(e.to_string()))?;
            let path = out.join(&cfg.paths.dataset);
            let data = pipeline::generate(&cfg.generator, cfg.seed, &path, force)?;
            log::info!(
                "wrote {} ({} train, {} calibration, {} test)",
                path.display(),
                data.train.len(),
                data.calibration.len(),
                data.test.len()
            );
        }
        Cmd::Train { lambda, epochs, h_train, resume } => {
            let t = &mut cfg.train;
            t.lambda = lambda.unwrap_or(t.lambda);
            t.epochs = epochs.unwrap_or(t.epochs);
            t.h_train = h_train.unwrap_or(t.h_train);
            cfg.validate()?;
            let data_path = out.join(&cfg.paths.dataset);
            require(&data_path)?;
            let data = pipeline::load_dataset(&data_path)?;
            let ckpt = out.join(&cfg.paths.checkpoint);
            let resume_from = resume.then(|| ckpt.clone());
            let trainer =
                pipeline::train(&cfg.train, cfg.seed, &data, &ckpt, &out.join(&cfg.paths.train_log), resume_from.as_deref(), force)?;
            log::info!("wrote {} after {} epochs", ckpt.display(), trainer.epoch);
        }
        Cmd::Calibrate { alpha } => {
            cfg.inference.alpha = alpha.unwrap_or(cfg.inference.alpha);
            cfg.inference.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (model, data) = load_model_and_data(&cfg, out)?;
            let calib = pipeline::calibrate(&model, &data.calibration, cfg.inference.alpha, cfg.jobs)?;
            let path = out.join(&cfg.paths.calibration);
            if path.exists() && !force {
                return Err(Error::Config(format!("{} exists; pass --force to overwrite", path.display())));
            }
            fs::write(&path, calib.to_json()?)?;
            log::info!("tau = {} from {} calibration samples", calib.tau, calib.n_cal);
        }
        Cmd::Predict { h, k, mode } => {
            let inf = &mut cfg.inference;
            inf.h = h.unwrap_or(inf.h);
            inf.k_infer = k.unwrap_or(inf.k_infer);
            inf.aggregation = mode.unwrap_or(inf.aggregation);
            inf.validate().map_err(|e| Error::Config(e.to_string()))?;
            let (model, data) = load_model_and_data(&cfg, out)?;
            let calib_path = out.join(&cfg.paths.calibration);
            let calib = if calib_path.exists() { Some(CalibrationResult::from_json(&fs::read_to_string(&calib_path)?)?) } else { None };
            let records = pipeline::predict(&model, &cfg.inference, calib.as_ref(), &data.test, cfg.seed, cfg.jobs)?;
            let path = out.join(&cfg.paths.predictions);
            pipeline::write_predictions(pipeline::create_output(&path, force)?, &records)?;
            log::info!("wrote {} ({} records)", path.display(), records.len());
        }
        Cmd::Evaluate { mode } => {
            let mode = mode.unwrap_or(cfg.inference.aggregation);
            let data_path = out.join(&cfg.paths.dataset);
            let pred_path = out.join(&cfg.paths.predictions);
            require(&data_path)?;
            require(&pred_path)?;
            let data = pipeline::load_dataset(&data_path)?;
            let records = pipeline::read_predictions(pipeline::open_input(&pred_path)?)?;
            let ev = pipeline::evaluate(&records, &data, mode)?;
            let report = out.join(&cfg.paths.report_json);
            if report.exists() && !force {
                return Err(Error::Config(format!("{} exists; pass --force to overwrite", report.display())));
            }
            pipeline::write_reports(&ev, out, &cfg.paths)?;
            print!("{}", ev.modes_csv());
        }
        Cmd::Ablate { sweep } => {
            cfg.validate()?;
            let data_path = out.join(&cfg.paths.dataset);
            require(&data_path)?;
            let data = pipeline::load_dataset(&data_path)?;
            let csv = pipeline::ablate(&cfg, &data, sweep, out)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn load_model_and_data(cfg: &ExperimentConfig, out: &Path) -> Result<(Model, conflift::synthkin::DatasetSplit)> {
    let ckpt = out.join(&cfg.paths.checkpoint);
    let data_path = out.join(&cfg.paths.dataset);
    require(&ckpt)?;
    require(&data_path)?;
    let (model, _) = Model::load(&ckpt)?;
    Ok((model, pipeline::load_dataset(&data_path)?))
}
