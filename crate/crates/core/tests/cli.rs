use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
[generator]
count = 24
frames = 2
cal_fraction = 0.25
test_fraction = 0.25
[train]
epochs = 2
h_train = 4
batch_size = 4
lr = 1e-3
diffusion_steps = 50
[train.model]
frames = 2
embed_dim = 8
spatial_layers = 1
temporal_layers = 1
hidden_mult = 1
[inference]
h = 6
k_infer = 2
"#;

fn conflift(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conflift"))
        .args(["--config", "tiny.toml", "--out", "."])
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = conflift(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["generate"]);
    ok(d, &["train"]);
    ok(d, &["calibrate"]);
    ok(d, &["predict"]);
    let out = ok(d, &["evaluate"]);
    for f in [
        "dataset.jsonl",
        "model.chmp",
        "train_log.jsonl",
        "calibration.json",
        "predictions.jsonl",
        "report.json",
        "report.csv",
        "report_modes.csv",
    ] {
        assert!(d.join(f).exists(), "{f} missing");
    }
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("mode,mpjpe_mm"));
    assert_eq!(stdout.lines().count(), 7);
    let predictions = fs::read_to_string(d.join("predictions.jsonl")).unwrap();
    assert_eq!(predictions.lines().count(), 6);
}

#[test]
fn regenerating_is_byte_identical() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["generate"]);
    let first = fs::read(d.join("dataset.jsonl")).unwrap();
    ok(d, &["generate", "--force"]);
    assert_eq!(first, fs::read(d.join("dataset.jsonl")).unwrap());
    ok(d, &["--seed", "6", "generate", "--force"]);
    assert_ne!(first, fs::read(d.join("dataset.jsonl")).unwrap());
}

#[test]
fn existing_outputs_need_force() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["generate"]);
    let again = conflift(d, &["generate"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = workspace();
    let d = dir.path();
    assert_eq!(conflift(d, &["predict"]).status.code(), Some(3));
    assert_eq!(conflift(d, &["train"]).status.code(), Some(3));
    assert_eq!(conflift(d, &["generate", "--cal-fraction", "0.7"]).status.code(), Some(2));
    fs::write(d.join("tiny.toml"), "seed = \"five\"").unwrap();
    assert_eq!(conflift(d, &["generate"]).status.code(), Some(2));
    let usage = Command::new(env!("CARGO_BIN_EXE_conflift")).arg("bogus").output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
}

#[test]
fn cp_modes_need_calibration() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["generate"]);
    ok(d, &["train"]);
    assert_eq!(conflift(d, &["predict"]).status.code(), Some(3));
}

#[test]
fn ablation_writes_one_row_per_grid_value() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["generate"]);
    let out = ok(d, &["ablate", "--sweep", "h-infer"]);
    let csv = fs::read_to_string(d.join("ablate_h_infer.csv")).unwrap();
    assert_eq!(csv, String::from_utf8(out.stdout).unwrap());
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 7);
    assert!(rows[0].starts_with("h_infer,mpjpe_mm,"));
    assert!(rows[1].starts_with("1,"));
}
