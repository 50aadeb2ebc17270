//! Exit codes and output files of the `lrag` binary.

use std::path::Path;
use std::process::{Command, Output};

fn lrag(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lrag"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

#[test]
fn spectral_model_gives_a_twelve_row_profile() {
    let dir = tempfile::tempdir().unwrap();
    assert!(lrag(dir.path(), &["gen-toy-model", "--kind", "spectral"]).status.success());
    let weights = dir.path().join("weights.st");
    let run = lrag(dir.path(), &["td", "--weights", weights.to_str().unwrap(), "--pattern", "layer.{}.w_v"]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let csv = std::fs::read_to_string(dir.path().join("td_profile.csv")).unwrap();
    assert_eq!(csv.lines().count(), 13, "{csv}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("td_report.json")).unwrap()).unwrap();
    assert!(report["provenance"]["config_sha256"].is_string());
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let run = lrag(dir.path(), &["td", "--weights", "does-not-exist.st"]);
    assert_eq!(run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&run.stderr).contains("does-not-exist.st"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "seed = 1\nbogus = 2\n").unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_lrag"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(run.status.code(), Some(2));
}

#[test]
fn lrag_eval_without_adapter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(lrag(dir.path(), &["gen-data", "--num-examples", "20", "--corpus-size", "60"]).status.success());
    assert!(lrag(dir.path(), &["gen-toy-model", "--kind", "planted", "--data", d]).status.success());
    let model = format!("{d}/model.st");
    let run = lrag(dir.path(), &["eval", "--data", d, "--model", &model, "--mode", "lrag"]);
    assert_eq!(run.status.code(), Some(2));
}
