//! End-to-end checks of the `asbit` binary: exit codes, file outputs, and
//! reproducibility of stored-capture demodulation.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn asbit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_asbit"))
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("failed to spawn asbit")
}

#[test]
fn codegen_writes_files_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(asbit()
        .args(["codegen", "--degree", "9", "--length", "511", "--seed", "3"])
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("code.txt").exists());
    assert!(dir.path().join("code.bin").exists());
    assert!(dir.path().join("code.json").exists());

    let summary: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("summary must be JSON");
    assert_eq!(summary["preferred_pair"], serde_json::json!(true));
    assert_eq!(summary["family_size"], serde_json::json!(513));
    let text = fs::read_to_string(dir.path().join("code.txt")).unwrap();
    assert_eq!(text.trim().len(), 511);
}

#[test]
fn codegen_paper_operating_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(asbit()
        .args(["codegen", "--degree", "13", "--length", "511"])
        .arg("--out")
        .arg(dir.path()));
    assert!(out.status.success());
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["family_size"], serde_json::json!(8193));
    assert_eq!(
        summary["cross_correlation_values"],
        serde_json::json!([-129, -1, 127])
    );
}

#[test]
fn codegen_invalid_seed_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(asbit()
        .args(["codegen", "--degree", "5", "--seed", "33", "--length", "31"])
        .arg("--out")
        .arg(dir.path()));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(asbit()
        .args(["simulate", "--config", "/nonexistent/config.json"])
        .arg("--out")
        .arg(dir.path().join("run")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_demod_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    let out = run(asbit()
        .arg("simulate")
        .arg("--config")
        .arg(repo_config("smoke.json"))
        .arg("--out")
        .arg(&run_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "config.json",
        "truth.ndjson",
        "iq.bin",
        "iq.json",
        "detections.ndjson",
        "errors.json",
    ] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }

    // Re-demodulating the stored capture reproduces the run's detections.
    let redo = dir.path().join("redo.ndjson");
    let out = run(asbit()
        .arg("demod")
        .arg("--run-dir")
        .arg(&run_dir)
        .arg("--out")
        .arg(&redo));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let original = fs::read(run_dir.join("detections.ndjson")).unwrap();
    let replayed = fs::read(&redo).unwrap();
    assert_eq!(original, replayed, "stored-capture demod must match the run");
    assert!(!original.is_empty());
}

#[test]
fn simulate_same_seed_is_byte_identical_across_parallelism() {
    let dir = tempfile::tempdir().unwrap();
    let run_a = dir.path().join("a");
    let run_b = dir.path().join("b");
    let out = run(asbit()
        .arg("simulate")
        .arg("--config")
        .arg(repo_config("smoke.json"))
        .args(["--seed", "42", "--threads", "1"])
        .arg("--out")
        .arg(&run_a));
    assert!(out.status.success());
    let out = run(asbit()
        .arg("simulate")
        .arg("--config")
        .arg(repo_config("smoke.json"))
        .args(["--seed", "42", "--threads", "2"])
        .arg("--out")
        .arg(&run_b));
    assert!(out.status.success());

    for f in ["config.json", "truth.ndjson", "iq.bin", "iq.json", "detections.ndjson", "errors.json"] {
        let a = fs::read(run_a.join(f)).unwrap();
        let b = fs::read(run_b.join(f)).unwrap();
        assert_eq!(a, b, "{f} differs across parallelism");
    }
}

#[test]
fn capacity_prints_sparsity_scaling() {
    let out = run(asbit().args([
        "capacity",
        "--ebn0-db",
        "4.8330853",
        "--utilization",
        "0.05",
    ]));
    assert!(out.status.success());
    let bound: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let n = bound["n_nodes"].as_f64().unwrap();
    let n_sparse = bound["n_sparse"].as_f64().unwrap();
    assert!((n_sparse - n / 0.05).abs() < 1e-9);
    assert!(bound["note"].as_str().unwrap().contains("169"));
}

#[test]
fn capacity_utilization_one_is_identity() {
    let out = run(asbit().args(["capacity", "--utilization", "1.0"]));
    assert!(out.status.success());
    let bound: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(bound["n_nodes"], bound["n_sparse"]);
}

#[test]
fn capacity_rejects_nonpositive_utilization() {
    let out = run(asbit().args(["capacity", "--utilization", "0.0"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_requires_grid_arrays() {
    let dir = tempfile::tempdir().unwrap();
    // A plain scenario config is not a sweep config.
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        format!(
            "{{\"base\": {}}}",
            fs::read_to_string(repo_config("smoke.json")).unwrap()
        ),
    )
    .unwrap();
    let out = run(asbit()
        .args(["sweep", "--kind", "nodes"])
        .arg("--config")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("sweep")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sweep_writes_csv_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    fs::write(
        &cfg,
        format!(
            "{{\"base\": {}, \"n_values\": [6, 12], \"background_rates_hz\": [25.0]}}",
            fs::read_to_string(repo_config("smoke.json")).unwrap()
        ),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = run(asbit()
        .args(["sweep", "--kind", "nodes"])
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("nodes.csv")).unwrap();
    assert!(csv.starts_with("n_nodes,background_rate_hz,mean_eer"));
    assert_eq!(csv.lines().count(), 3);
    assert!(out_dir.join("nodes.meta.json").exists());
}

#[test]
fn calibrate_threshold_reports_chosen_k() {
    let out = run(asbit()
        .arg("calibrate-threshold")
        .arg("--config")
        .arg(repo_config("smoke.json"))
        .args(["--duration-s", "0.3"]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(table["chosen_k"].as_f64().unwrap() > 1.0);
    assert!(table["rows"].as_array().unwrap().len() > 3);
}
