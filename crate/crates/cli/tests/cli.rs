use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--num-event-types",
    "9",
    "--examples-per-type",
    "8",
    "--background-vocab",
    "12",
    "--split",
    "5,2,2",
    "--n-way",
    "2",
    "--k-shot",
    "2",
    "--query-per-class",
    "2",
    "--num-layers",
    "1",
    "--num-heads",
    "2",
    "--hidden-dim",
    "8",
    "--ffn-dim",
    "16",
    "--inner-steps",
    "2",
    "--inner-lr",
    "0.1",
    "--meta-lr",
    "0.01",
    "--total-iterations",
    "2",
    "--validate-every",
    "1",
    "--num-seeds",
    "1",
    "--valid-episodes",
    "2",
    "--test-episodes",
    "2",
    "--sequential",
];

fn metaevent(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metaevent"))
        .args(args)
        .env("METAEVENT_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn with_tiny<'a>(head: &[&'a str]) -> Vec<&'a str> {
    let mut v = head.to_vec();
    v.extend_from_slice(TINY);
    v
}

fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(metaevent(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(metaevent(dir.path(), &["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(metaevent(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let bad = metaevent(dir.path(), &with_tiny(&["train", "--n-way", "0"]));
    assert_eq!(bad.status.code(), Some(1));
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_field = 3\n").unwrap();
    assert_eq!(metaevent(dir.path(), &["train", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.ckpt");
    let out = metaevent(dir.path(), &["eval", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(metaevent(dir.path(), &["eval", "--checkpoint", garbage.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn train_eval_and_export_under_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let out = metaevent(dir.path(), &with_tiny(&["train", "--output-dir", "run"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    assert!(run.join("report.json").is_file());
    assert!(run.join("seed-0/run_log.jsonl").is_file());

    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    let mut keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["ami", "ari", "f1", "fm", "homogeneity", "nmi", "rand"]);

    for line in std::fs::read_to_string(run.join("seed-0/run_log.jsonl")).unwrap().lines() {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(rec.get("iteration").is_some());
    }

    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    let ckpt = report["seeds"][0]["checkpoint"].as_str().unwrap().to_string();
    let eval = metaevent(dir.path(), &["eval", "--checkpoint", &ckpt, "--output", "eval.jsonl"]);
    assert_eq!(eval.status.code(), Some(0));
    assert_eq!(stdout_json(&eval)["mean"], report["seeds"][0]["test"]);
    assert!(dir.path().join("eval.jsonl").is_file());

    let export = metaevent(dir.path(), &["export-features", "--checkpoint", &ckpt, "--episodes", "2", "--output", "features.jsonl"]);
    assert_eq!(export.status.code(), Some(0));
    let rows = std::fs::read_to_string(dir.path().join("features.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2 * 2 * 2);
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"seed": 5, "loss": {"lambda_c": 0.5}}"#).unwrap();
    let out = metaevent(dir.path(), &with_tiny(&["train", "--config", cfg.to_str().unwrap(), "--output-dir", "cfg"]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cfg/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 5);
    assert_eq!(report["config"]["loss"]["lambda_c"], 0.5);
    assert_eq!(report["config"]["episode"]["n_way"], 2);
}

#[test]
fn sweep_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let empty = metaevent(dir.path(), &with_tiny(&["sweep", "--param", "lambda_c", "--values", "--output-dir", "empty"]));
    assert_eq!(empty.status.code(), Some(0));
    assert_eq!(stdout_json(&empty)["rows"].as_array().unwrap().len(), 0);

    let sweep = metaevent(dir.path(), &with_tiny(&["sweep", "--param", "lambda_c", "--values", "0,1", "--output-dir", "sw"]));
    assert_eq!(sweep.status.code(), Some(0), "{}", String::from_utf8_lossy(&sweep.stderr));
    let rows = std::fs::read_to_string(dir.path().join("sw/sweep_lambda_c.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 2);

    let ablate = metaevent(dir.path(), &with_tiny(&["ablate", "--components", "meta_learner", "--output-dir", "ab"]));
    assert_eq!(ablate.status.code(), Some(0), "{}", String::from_utf8_lossy(&ablate.stderr));
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(dir.path().join("ab/ablation.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let names: Vec<&str> = rows.iter().map(|r| r["value"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "no_meta_learner"]);

    let zero_shot_k = metaevent(dir.path(), &with_tiny(&["sweep", "--param", "k_shot", "--values", "1", "--mode", "zero_shot"]));
    assert_eq!(zero_shot_k.status.code(), Some(1));
}
