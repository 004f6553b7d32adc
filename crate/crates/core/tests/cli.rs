//! End-to-end behavior of the `trm-lab` binary.

use std::path::Path;
use std::process::{Command, Output};

fn trm_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trm-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bounds_table_defaults() {
    let out = trm_lab(&["bounds-table"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("# trm-lab "));
    assert!(text.contains("config_sha256="));
    assert!(text.contains("Classical,1.6773120000000001e3,1677.3"));
    assert!(text.contains(",35.0\n"));
    assert!(text.contains(",8.2\n"));
}

#[test]
fn estimators_match_reference_rounding() {
    let text = String::from_utf8(trm_lab(&["estimators"]).stdout).unwrap();
    assert!(text.contains(",-0.69,0.31,0.69\n"));
    assert!(text.contains(",-4.61,94.39,4.61\n"));
    assert!(text.contains(",0.00,0.00,0.00\n"));
}

#[test]
fn verify_small_sweep_passes() {
    let out = trm_lab(&["verify", "--pairs", "1000", "--vocab", "2", "--horizon", "4", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["data"]["pairs"], 1000);
    assert_eq!(doc["data"]["violations"].as_array().unwrap().len(), 0);
    assert_eq!(doc["meta"]["seed"], 7);
}

#[test]
fn forced_violation_writes_replayable_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trm_lab(&[
        "verify", "--pairs", "3", "--vocab", "2", "--horizon", "2", "--slack", "-1", "--out", arg(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let repro = tmp.path().join("repro");
    let bundles: Vec<_> = std::fs::read_dir(&repro).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(bundles.len(), 3);

    let again = trm_lab(&["verify", "--replay", arg(&bundles[0]), "--slack", "-1"]);
    assert_eq!(again.status.code(), Some(1));
    let clean = trm_lab(&["verify", "--replay", arg(&bundles[0])]);
    assert_eq!(clean.status.code(), Some(0));
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("exp.json");
    std::fs::write(&cfg, r#"{"version": 1, "bounds_table": {"horizon": 16, "kl_tok_max": 0.5}}"#).unwrap();
    let from_file = String::from_utf8(trm_lab(&["bounds-table", "--config", arg(&cfg)]).stdout).unwrap();
    assert!(from_file.contains("Classical,1.2000000000000000e2,120.0"));
    let flagged = String::from_utf8(trm_lab(&["bounds-table", "--config", arg(&cfg), "--horizon", "4"]).stdout).unwrap();
    assert!(flagged.contains("Classical,6.0000000000000000e0,6.0"));
}

#[test]
fn malformed_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.json");
    std::fs::write(&cfg, "{\"version\": 1,\n  \"trm_run\": {\"stepz\": 3}}").unwrap();
    let out = trm_lab(&["trm-run", "--config", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("stepz") && err.contains("line 2"), "{err}");

    std::fs::write(&cfg, r#"{"version": 2}"#).unwrap();
    assert_eq!(trm_lab(&["estimators", "--config", arg(&cfg)]).status.code(), Some(2));
}

#[test]
fn budget_override_from_environment() {
    let small = Command::new(env!("CARGO_BIN_EXE_trm-lab"))
        .args(["counterexample", "--horizon", "6"])
        .env("TRM_LAB_MAX_TRAJECTORIES", "32")
        .output()
        .unwrap();
    assert_eq!(small.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&small.stderr).contains("budget"));

    let garbage = Command::new(env!("CARGO_BIN_EXE_trm-lab"))
        .arg("estimators")
        .env("TRM_LAB_MAX_TRAJECTORIES", "lots")
        .output()
        .unwrap();
    assert_eq!(garbage.status.code(), Some(2));
}

#[test]
fn trm_run_writes_trace_and_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trm_lab(&["trm-run", "--steps", "4", "--batch-size", "8", "--out", arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let trace = std::fs::read_to_string(tmp.path().join("trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0]["meta"]["config_sha256"].is_string());
    for (i, rec) in lines[1..].iter().enumerate() {
        assert_eq!(rec["step"], i);
        for key in ["l_masked_sample", "l_exact", "j_theta", "j_roll", "minorizer", "mask_rate", "max_kl_accepted"] {
            assert!(rec.get(key).is_some(), "{key}");
        }
    }
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["unix_time"].is_u64());
}

#[test]
fn sampled_mode_trace_is_labeled_approximate() {
    let out = trm_lab(&["trm-run", "--steps", "2", "--mode", "sample-k3-avg", "--delta-avg", "0.01"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().skip(1).all(|l| l.contains("\"approximate\":true")));
}

#[test]
fn profile_of_routing_flip() {
    let tmp = tempfile::tempdir().unwrap();
    let out = trm_lab(&["profile", "--perturbation", "routing-flip", "--seed", "4", "--out", arg(tmp.path())]);
    assert_eq!(out.status.code(), Some(0));
    let curve = std::fs::read_to_string(tmp.path().join("mask_rate.csv")).unwrap();
    let accepted: Vec<f64> = curve
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("delta"))
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(accepted.windows(2).all(|w| w[1] >= w[0]));
    assert!(tmp.path().join("kl_histogram.csv").exists());
}
