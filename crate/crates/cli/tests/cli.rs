use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_CONFIG: &str = r#"{
  "dataset": "data/tiny.jsonl",
  "out": "out",
  "hidden_dims": [16],
  "finetune_epochs": 3,
  "mask_epochs": 2,
  "retrain_epochs": 2
}"#;

fn olt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_olt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = olt(dir, args);
    assert!(
        out.status.success(),
        "olt {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), TINY_CONFIG).unwrap();
    ok(
        dir.path(),
        &["--config", "cfg.json", "generate", "--k-ind", "4", "--k-ood", "2", "--dim", "6", "--n-per-class", "30"],
    );
    dir
}

#[test]
fn phases_run_in_order_and_resume_from_checkpoints() {
    let dir = workspace();
    let d = dir.path();
    let train = ok(d, &["--config", "cfg.json", "train"]);
    assert!(train.contains("restored from checkpoints: none"), "{train}");
    let prune = ok(d, &["--config", "cfg.json", "prune"]);
    assert!(prune.contains("restored from checkpoints: dense"), "{prune}");
    assert!(prune.contains("sparsity"), "{prune}");
    let retrain = ok(d, &["--config", "cfg.json", "retrain"]);
    assert!(retrain.contains("dense, gates, subnetwork"), "{retrain}");
    for phase in ["dense", "gates", "subnetwork", "olt"] {
        let phase_dir = d.join("out/checkpoints").join(phase);
        assert!(phase_dir.join("checkpoint.json").is_file(), "{phase}");
        assert!(phase_dir.join("manifest.json").is_file(), "{phase}");
    }
}

#[test]
fn eval_writes_every_report_and_report_reads_them_back() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "cfg.json", "eval"]);
    let reports: Vec<_> = std::fs::read_dir(d.join("out/reports"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    // 2 models x 8 scorers, the masked-only model, one calibration report per model
    assert_eq!(reports.len(), 19, "{reports:?}");
    assert!(reports.iter().any(|r| r == "masked-temp-msp.json"));
    assert!(d.join("out/scores/olt-temp-msp.jsonl").is_file());
    assert!(d.join("out/bins/dense-msp.csv").is_file());
    assert!(d.join("out/manifest.json").is_file());

    let table = ok(d, &["--config", "cfg.json", "report"]);
    assert_eq!(table.lines().filter(|l| l.starts_with("olt ")).count(), 9, "{table}");
    assert!(table.contains("fitted_T"));
}

#[test]
fn sweep_writes_one_row_per_temperature() {
    let dir = workspace();
    let d = dir.path();
    let csv = ok(d, &["--config", "cfg.json", "sweep"]);
    let saved = std::fs::read_to_string(d.join("out/sweep/olt-temp-msp.csv")).unwrap();
    assert_eq!(csv, saved);
    let mut lines = saved.lines();
    assert_eq!(lines.next(), Some("temperature,tnr95,acc,auroc"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "cfg.json", "--out", "a", "--seed", "7", "eval"]);
    ok(d, &["--config", "cfg.json", "--out", "b", "--seed", "7", "eval"]);
    for file in ["manifest.json", "reports/olt-msp.json", "scores/dense-energy.jsonl"] {
        let a = std::fs::read(d.join("a").join(file)).unwrap();
        let b = std::fs::read(d.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
}

#[test]
fn theorem_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["theorem-check", "--pairs", "300"]);
    assert!(out.contains("violations"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("typo.json"), r#"{"finetune_epoch": 3}"#).unwrap();
    let out = olt(d, &["--config", "typo.json", "train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune_epoch"));

    let out = olt(d, &["report"]);
    assert!(!out.status.success());

    let out = olt(d, &["train"]);
    assert!(!out.status.success(), "missing dataset must fail");
}
