//! The `modir` binary end to end on tiny budgets.

use std::path::Path;
use std::process::Command;

use modir::bundle::{read_bundle, Scatter, SolutionWeights};

fn modir(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_modir")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let (code, _, err) = modir(&["train-mo", "--nonsense"]);
    assert_eq!(code, 1);
    assert!(err.contains("Usage"), "{err}");
    assert_eq!(modir(&[]).0, 1);
    assert_eq!(modir(&["train-mo", "--out", "x", "--ref", "1,a,1"]).0, 1);
    assert_eq!(modir(&["--help"]).0, 0);
}

#[test]
fn synth_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (code, _, err) = modir(&["synth", "--seed", "3", "--count", "4", "--train", "3", "--out", path(&data)]);
    assert_eq!(code, 0, "{err}");

    let (code, out, err) = modir(&[
        "train-mo", "--p", "3", "--iters", "2", "--ref", "1,1,1", "--seed", "3", "--data", path(&data), "--out",
        path(&run), "--export-pairs", "1",
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("final_hv"));
    let bundle = read_bundle(&run).unwrap();
    assert_eq!(bundle.manifest.kind, "train-mo");
    assert_eq!(bundle.manifest.solutions.len(), 3);
    assert!(bundle
        .manifest
        .solutions
        .iter()
        .all(|s| s.weights == SolutionWeights::Label("dynamic".into())));
    let scatter: Scatter = bundle.json("scatter.json").unwrap();
    assert_eq!(scatter.solutions.len(), 3);

    let metrics = dir.path().join("metrics.json");
    let (code, _, err) = modir(&["evaluate", "--data", path(&run), "--out", path(&metrics)]);
    assert_eq!(code, 0, "{err}");
    let value: serde_json::Value = serde_json::from_slice(&std::fs::read(&metrics).unwrap()).unwrap();
    let tre0 = value["report"]["mean_set"]["solutions"][0]["mean_tre"].as_f64().unwrap();
    assert_eq!(tre0, scatter.solutions[0].tre);

    let export = dir.path().join("export");
    let (code, _, err) = modir(&["export", "--data", path(&run), "--out", path(&export), "--export-pairs", "1"]);
    assert_eq!(code, 0, "{err}");
    assert_eq!(
        std::fs::read(run.join("scatter.json")).unwrap(),
        std::fs::read(export.join("scatter.json")).unwrap()
    );
}

#[test]
fn corrupted_bundle_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(modir(&["synth", "--count", "2", "--train", "1", "--out", path(&data)]).0, 0);
    let target = data.join("pairs/001/target.png");
    let mut bytes = std::fs::read(&target).unwrap();
    bytes[40] ^= 0xff;
    std::fs::write(&target, bytes).unwrap();
    let (code, _, err) = modir(&["evaluate", "--data", path(&data)]);
    assert_eq!(code, 3);
    assert!(err.contains("target.png"), "{err}");
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, _, err) = modir(&["train-grid", "--p", "5", "--iters", "1", "--out", path(dir.path())]);
    assert_eq!(code, 2);
    assert!(err.contains("27"), "{err}");
    let (code, _, _) = modir(&["train-mo", "--ref", "1,1", "--iters", "1", "--out", path(dir.path())]);
    assert_eq!(code, 2);
}

#[test]
fn genmed_writes_one_trace_per_reference() {
    let dir = tempfile::tempdir().unwrap();
    let (code, out, err) = modir(&[
        "genmed", "--p", "25", "--iters", "200", "--ref", "10,10,10", "--ref", "2.2,2.2,2.2", "--out", path(dir.path()),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(out.contains("edge_statistic"));
    let bundle = read_bundle(dir.path()).unwrap();
    assert_eq!(bundle.manifest.kind, "genmed");
    assert_eq!(bundle.manifest.files.len(), 2);
}
