//! End-to-end checks of the command-line interface: config validation,
//! exit codes, and the generate-log → replay pipeline.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dtrbandit"))
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn validate_accepts_shipped_configs() {
    for cfg in [
        "configs/simulate_full.json",
        "configs/simulate_ci.json",
        "configs/sweep.json",
    ] {
        let out = bin()
            .args(["validate", "--config"])
            .arg(workspace_file(cfg))
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{cfg}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

#[test]
fn validate_reports_computed_oracle_rule() {
    let out = bin()
        .args(["validate", "--config"])
        .arg(workspace_file("configs/simulate_ci.json"))
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("stage-1 oracle"), "stdout: {stdout}");
    // The computed rule keeps arm 1 optimal on the whole positive side.
    assert!(stdout.contains("arm 1"), "stdout: {stdout}");
    assert!(stdout.contains("arm 2"), "stdout: {stdout}");
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"horizon\": 0}").unwrap();
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&bad)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    let missing = dir.path().join("missing.json");
    let out = bin()
        .args(["simulate", "--config"])
        .arg(&missing)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_bootstrap_reps_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("replay.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "dataset": "nowhere.csv",
            "d": 1, "k1": 2, "k2": 2,
            "policy": {"variant": "greedy"},
            "horizon": 10,
            "bootstrap_reps": 0,
            "base_seed": 1,
            "output_dir": dir.path().join("out")
        })
        .to_string(),
    )
    .unwrap();
    let out = bin().args(["replay", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bootstrap_reps"));
}

#[test]
fn generate_log_then_replay_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("log.csv");
    let out = bin()
        .args(["generate-log", "--rounds", "800", "--seed", "5", "--instance"])
        .arg(workspace_file("configs/synthetic1d.json"))
        .arg("--out")
        .arg(&log)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let cfg = dir.path().join("replay.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "dataset": log,
            "d": 1, "k1": 2, "k2": 2,
            "policy": {"variant": "dtr_bandit", "q": 1, "h1": 0.5, "h2": 0.5},
            "horizon": 50,
            "bootstrap_reps": 3,
            "base_seed": 9,
            "output_dir": dir.path().join("out")
        })
        .to_string(),
    )
    .unwrap();
    let out = bin().args(["replay", "--config"]).arg(&cfg).output().unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = dir.path().join("out/replay_report.json");
    assert!(report.exists());
    let text = std::fs::read_to_string(report).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed["policy"], "dtr_bandit");
    assert_eq!(parsed["failed_reps"], 0);
}

#[test]
fn simulate_writes_curves_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "instance": workspace_file("configs/synthetic1d.json"),
            "policies": [{"variant": "uniform_random"}],
            "horizon": 200,
            "paths": 2,
            "base_seed": 4,
            "output_dir": dir.path().join("out"),
            "record_every": 100
        })
        .to_string(),
    )
    .unwrap();
    let out = bin()
        .args(["simulate", "--threads", "1", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let curve = std::fs::read_to_string(dir.path().join("out/uniform_random_regret.csv")).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next(), Some("t,mean_regret,stderr"));
    assert_eq!(curve.lines().count(), 3); // header + t=100 + t=200
    assert!(dir.path().join("out/summary.json").exists());
}
