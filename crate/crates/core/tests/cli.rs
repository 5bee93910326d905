//! The `engine` command line: exit codes and report files.

use std::path::PathBuf;
use std::process::Command;

use prefill_engine::cli::{main_with_args, EXIT_ERROR};

fn configs() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn arg(p: &std::path::Path) -> String {
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_then_run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let workload = dir.path().join("w.json");
    let code = main_with_args(["engine", "gen-workload", "--spec", &arg(&configs().join("workload_spec.json")), "--out", &arg(&workload)]);
    assert_eq!(code, 0);
    let report = dir.path().join("run.json");
    let events = dir.path().join("events.jsonl");
    let code = main_with_args([
        "engine",
        "run",
        "--model-config",
        &arg(&configs().join("model.json")),
        "--workload",
        &arg(&workload),
        "--score-config",
        &arg(&configs().join("score.json")),
        "--mode",
        "uniprefill",
        "--flops-audit",
        "--tp",
        "2",
        "--report",
        &arg(&report),
        "--events",
        &arg(&events),
    ]);
    assert_eq!(code, 0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["requests"].as_array().unwrap().len(), 8);
    assert!(std::fs::read_to_string(report.with_extension("txt")).unwrap().contains("tok/s"));
    assert!(std::fs::read_to_string(&events).unwrap().lines().count() >= 8);
}

#[test]
fn small_bench_grid() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("bench.json");
    let code = main_with_args([
        "engine",
        "bench",
        "--lengths",
        "256,512",
        "--batches",
        "1,2",
        "--repetitions",
        "1",
        "--report",
        &arg(&report),
    ]);
    assert_eq!(code, 0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 8);
}

#[test]
fn bad_config_exits_with_error_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("model.json");
    std::fs::write(&bad, r#"{"num_blocks": 0}"#).unwrap();
    let code = main_with_args([
        "engine",
        "run",
        "--model-config",
        &arg(&bad),
        "--workload",
        &arg(&configs().join("workload.json")),
        "--score-config",
        &arg(&configs().join("score.json")),
        "--report",
        &arg(&dir.path().join("r.json")),
    ]);
    assert_eq!(code, EXIT_ERROR);
    assert_eq!(main_with_args(["engine", "run", "--no-such-flag"]), EXIT_ERROR);
}

#[test]
fn binary_exit_status() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.json");
    let ok = Command::new(env!("CARGO_BIN_EXE_engine"))
        .args(["gen-workload", "--spec", &arg(&configs().join("workload_spec.json")), "--out", &arg(&out)])
        .status()
        .unwrap();
    assert!(ok.success());
    let missing = Command::new(env!("CARGO_BIN_EXE_engine"))
        .args(["gen-workload", "--spec", "/nonexistent.json", "--out", &arg(&out)])
        .status()
        .unwrap();
    assert_eq!(missing.code(), Some(EXIT_ERROR));
}

#[test]
fn task_suite_runs() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("tasks.json");
    let code = main_with_args([
        "engine",
        "tasks",
        "--suite",
        &arg(&configs().join("suite.json")),
        "--lipschitz-trials",
        "4",
        "--report",
        &arg(&report),
    ]);
    assert_eq!(code, 0);
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(json["error_bounds"].as_array().unwrap().iter().all(|b| b["bound_holds"] == true));
}
