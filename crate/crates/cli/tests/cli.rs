use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sgjnd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sgjnd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn arg(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn error_line(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "expected one diagnostic line, got {text}");
    serde_json::from_str(lines[0]).expect("structured diagnostic")
}

const SMALL_RUN: &str = r#"{
  "run_dir": "run",
  "data": {"source": "synthetic", "seed": 7, "count": 6, "size": 64},
  "train": {
    "epochs": 2,
    "folds": 3,
    "n_patches": 4,
    "patch_size": 32,
    "levels_per_image": 4,
    "fusion": {"d_model": 16, "head_count": 4},
    "head": {"hidden": [8, 4]}
  }
}"#;

#[test]
fn selftest_passes_on_a_clean_build() {
    let out = sgjnd(&["selftest"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn predict_without_checkpoint_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = sgjnd(&[
        "predict",
        "--ckpt",
        arg(&dir.path().join("missing")),
        "--ladder",
        arg(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let diag = error_line(&out);
    assert_eq!(diag["kind"], "usage");
    assert!(diag["message"].as_str().unwrap().contains("checkpoint"));
}

#[test]
fn malformed_invocations_exit_with_usage_code() {
    assert_eq!(sgjnd(&[]).status.code(), Some(2));
    let out = sgjnd(&["predict", "--ckpt", "x", "--ladder", "y", "--window", "6"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "usage");
}

#[test]
fn schema_violations_stop_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 1, "learning_rate": 0.1}}"#).unwrap();
    let out = sgjnd(&["prepare", "--config", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["kind"], "usage");

    fs::write(&cfg, r#"{"train": {"folds": 2}}"#).unwrap();
    let out = sgjnd(&["prepare", "--config", arg(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("run").exists());
}

fn run_ok(args: &[&str]) -> Output {
    let out = sgjnd(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn synthetic_pipeline_produces_every_declared_file() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("run.json");
    fs::write(&cfg, SMALL_RUN).unwrap();
    let run = root.join("run");

    run_ok(&["prepare", "--config", arg(&cfg)]);
    let index = run.join("data/index.json");
    assert!(index.exists());
    let index_bytes = fs::read(&index).unwrap();

    run_ok(&["train", "--config", arg(&cfg), "--fold", "0"]);
    let fold = run.join("fold0");
    for f in ["checkpoint.json", "checkpoint.safetensors", "train_log.csv", "fold.json", "manifest.json"] {
        assert!(fold.join(f).exists(), "missing {f}");
    }

    let split: serde_json::Value = serde_json::from_slice(&fs::read(fold.join("fold.json")).unwrap()).unwrap();
    let preds = run.join("preds");
    for id in split["test"].as_array().unwrap() {
        let ladder = run.join("data/ladders").join(id.as_str().unwrap());
        run_ok(&["predict", "--ckpt", arg(&fold), "--ladder", arg(&ladder), "--out", arg(&preds)]);
    }
    // stdout mode emits a single JSON result
    let first = split["test"][0].as_str().unwrap();
    let out = run_ok(&[
        "predict",
        "--ckpt",
        arg(&fold),
        "--ladder",
        arg(&run.join("data/ladders").join(first)),
        "--window",
        "6",
        "--theta",
        "5",
    ]);
    let pred: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(pred["image_id"], first);
    assert_eq!(pred["window_size"], 6);

    run_ok(&["evaluate", "--pred-dir", arg(&preds), "--index", arg(&index)]);
    let eval = run.join("eval.json");
    assert!(eval.exists());

    let report = run.join("report");
    run_ok(&["report", "--eval", arg(&eval), "--out", arg(&report)]);
    for f in ["report.json", "report.csv", "abs_error_histogram.svg", "psnr_scatter.svg", "manifest.json"] {
        assert!(report.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["steps"]["prepare"]["seeds"]["synthetic"], 7);

    // reruns overwrite with identical content
    let report_bytes = fs::read(report.join("report.json")).unwrap();
    let manifest_bytes = fs::read(report.join("manifest.json")).unwrap();
    run_ok(&["prepare", "--config", arg(&cfg)]);
    run_ok(&["report", "--eval", arg(&eval), "--out", arg(&report)]);
    assert_eq!(fs::read(&index).unwrap(), index_bytes);
    assert_eq!(fs::read(report.join("report.json")).unwrap(), report_bytes);
    assert_eq!(fs::read(report.join("manifest.json")).unwrap(), manifest_bytes);
}
