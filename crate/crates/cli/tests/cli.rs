use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llmperf::engine::PredictionReport;
use llmperf::report::{from_json, read_csv, ReportSummary};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_llmperf"))
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn llmperf")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn train_cfg() -> String {
    configs().join("train_gpt22b.toml").display().to_string()
}

#[test]
fn train_json_parses_back() {
    let o = run(&["train", "--config", &train_cfg(), "--output", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: PredictionReport = from_json(&stdout(&o)).unwrap();
    let sum: f64 = report.phases.values().sum();
    assert!((sum - report.total_time).abs() <= 1e-9 * report.total_time);
}

#[test]
fn empty_config_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.toml");
    std::fs::write(&path, "").unwrap();
    let o = run(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn missing_config_exits_nonzero() {
    let o = run(&["train", "--config", "/nonexistent/run.toml"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn set_override_changes_result() {
    let base = run(&["train", "--config", &train_cfg(), "--output", "json"]);
    let over = run(&[
        "train",
        "--config",
        &train_cfg(),
        "--output",
        "json",
        "--set",
        "parallelism.recompute=\"full\"",
    ]);
    assert!(over.status.success(), "{}", String::from_utf8_lossy(&over.stderr));
    let a: PredictionReport = from_json(&stdout(&base)).unwrap();
    let b: PredictionReport = from_json(&stdout(&over)).unwrap();
    assert!(b.memory.activations < a.memory.activations);
    assert!(b.total_time > a.total_time);
}

#[test]
fn unknown_override_key_is_rejected() {
    let o = run(&["train", "--config", &train_cfg(), "--set", "nosuch.key=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn json_output_is_deterministic() {
    let dse = configs().join("dse_gpt7b.toml").display().to_string();
    let args = ["dse", "--config", dse.as_str(), "--output", "json", "--seed", "3"];
    let a = run(&args);
    let b = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn csv_round_trips_through_out_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("r.csv");
    let infer = configs().join("infer_llama13b.toml").display().to_string();
    let o = run(&["infer", "--config", &infer, "--output", "csv", "--out-file", csv_path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let parsed = read_csv(std::fs::File::open(&csv_path).unwrap()).unwrap();

    let j = run(&["infer", "--config", &infer, "--output", "json"]);
    let report: PredictionReport = from_json(&stdout(&j)).unwrap();
    assert_eq!(parsed, ReportSummary::from(&report));
    assert!(parsed.inference.is_some());
}

#[test]
fn mem_lists_every_recompute_mode() {
    let o = run(&["mem", "--config", &train_cfg(), "--output", "csv"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 4);
    for mode in ["none", "selective", "full"] {
        assert!(text.contains(mode));
    }
}

#[test]
fn memory_overflow_reports_footprint() {
    let o = run(&["train", "--config", &train_cfg(), "--set", "model=gpt_175b"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("memory overflow"), "{err}");
    assert!(err.contains("\"optimizer\""));
}

#[test]
fn sweep_covers_the_grid() {
    let cfg = configs().join("sweep_gpt7b.toml").display().to_string();
    let o = run(&["sweep", "--config", &cfg, "--output", "csv"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 4 * 2);
}

#[test]
fn validate_passes_bundled_fixtures() {
    let o = run(&["validate", "--fixtures", "training"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("11/11"));
}

#[test]
fn validate_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.toml");
    std::fs::write(
        &path,
        "[[training]]\nid = \"off\"\nmodel = \"gpt_22b\"\ncluster = \"a100_hdr\"\nexpected_time = 100.0\ntolerance = 0.1\nsource = \"test\"\n\n[training.parallelism]\ntp = 8\nsp = 8\nmicrobatches = 4\nrecompute = \"full\"\n",
    )
    .unwrap();
    let o = run(&["validate", "--fixture-file", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
}
