use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use btlab_core::search::AuditTrace;

fn btlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btlab")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    fs::write(
        &path,
        r#"{"data": {"n_optimal": 100, "n_test": 10},
            "model": {"n_layers": 1, "d_model": 16, "n_heads": 2, "d_ff": 32},
            "train": {"epochs": 1},
            "search": {"n": 4, "b": 1, "max_new": 48},
            "eval": {"max_new": 48}}"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

#[test]
fn pipeline_commands_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();

    assert!(btlab(&["--config", &cfg, "--out", &p("data"), "gen-data"]).status.success());
    for f in ["train.jsonl", "test_seen.jsonl", "test_new.jsonl", "manifest.json"] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }

    assert!(btlab(&["--config", &cfg, "--out", &p("train"), "train", "--data", &p("data")]).status.success());
    let metrics = fs::read_to_string(dir.path().join("train/metrics.csv")).unwrap();
    assert!(metrics.starts_with("step,epoch,loss,lr"));

    let out = btlab(&["--config", &cfg, "--out", &p("eval"), "eval", "--data", &p("data"), "--method", "dfs", "--split", "seen"]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["method"], "dfs(inf)");
    assert_eq!(report["accuracy"], 1.0);
    assert_eq!(report["error_histogram"].as_object().unwrap().len(), 4);

    let model = p("train/model.ckpt");
    let out = btlab(&["--config", &cfg, "--out", &p("search"), "search", "--model", &model, "--target", "10", "--numbers", "2", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let audit = p("search/audit.json");
    let out = btlab(&["replay-trace", &audit, "--model", &model]);
    assert!(out.status.success(), "{}{}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["rerun_matches"], 1);

    // a tampered trace fails the replay with a runtime error
    let mut trace: AuditTrace = serde_json::from_str(&fs::read_to_string(&audit).unwrap()).unwrap();
    trace.accounting.samples += 1;
    let bad = p("bad.json");
    fs::write(&bad, serde_json::to_string(&trace).unwrap()).unwrap();
    let out = btlab(&["replay-trace", &bad]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(stderr_json(&out)["error"]["kind"], "runtime");
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = btlab(&["--config", missing.to_str().unwrap(), "gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(stderr_json(&out)["error"]["kind"], "config");

    let unknown = dir.path().join("unknown.json");
    fs::write(&unknown, r#"{"trainer": {}}"#).unwrap();
    assert_eq!(btlab(&["--config", unknown.to_str().unwrap(), "gen-data"]).status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"data": {"k": 9}}"#).unwrap();
    assert_eq!(btlab(&["--config", bad.to_str().unwrap(), "gen-data"]).status.code(), Some(2));

    let data = dir.path().join("data");
    let out = btlab(&["eval", "--data", data.to_str().unwrap(), "--method", "greedy"]);
    assert_eq!(out.status.code(), Some(2));

    assert_eq!(btlab(&["replay-trace", missing.to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(btlab(&["eval", "--data", "x", "--method", "sample(3)"]).status.code(), Some(2));
}

#[test]
fn config_round_trips_through_json() {
    let cfg = btlab_cli::ExperimentConfig::default().with_seed(Some(9));
    let text = serde_json::to_string(&cfg).unwrap();
    let back: btlab_cli::ExperimentConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.search.seed, 9);
    assert_eq!(back.train.seed, 9);
}
