use std::path::Path;
use std::process::{Command, Output};

fn multitrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_multitrain"))
        .args(args)
        .output()
        .expect("spawn multitrain")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train(out: &Path, steps: usize, extra: &[&str]) -> Output {
    let steps = format!("train.steps={steps}");
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--set", &steps];
    args.extend_from_slice(extra);
    multitrain(&args)
}

#[test]
fn train_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), 10, &["--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("metrics.ndjson")).unwrap();
    let steps = metrics
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v.get("total").is_some())
        .count();
    assert_eq!(steps, 10);
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("mode,dataset,top1,top5,steps,seed"));
    assert!(lines.all(|l| l.starts_with("full,") && l.ends_with(",10,3")));
    let cfg = std::fs::read_to_string(dir.path().join("resolved_config.cfg")).unwrap();
    assert!(cfg.contains("seed = 3"));
    assert!(dir.path().join("checkpoint_10.mttn").exists());
}

#[test]
fn identical_runs_write_identical_reports() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(code(&train(d.path(), 5, &[])), 0);
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("report.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn existing_outputs_need_force() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), 2, &[])), 0);
    let again = train(dir.path(), 2, &[]);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    assert_eq!(code(&train(dir.path(), 2, &["--force"])), 0);
}

#[test]
fn unknown_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = multitrain(&["train", "--out", dir.path().to_str().unwrap(), "--set", "train.stepz=3"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
    assert_eq!(code(&multitrain(&["train", "--no-such-flag"])), 1);
}

#[test]
fn gradcheck_under_an_impossible_threshold_fails_verification() {
    let o = multitrain(&["gradcheck", "--threshold", "1e-12"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn divergent_training_is_a_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), 20, &["--set", "train.lr=1e30", "--force"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn ablate_reports_every_mode_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = multitrain(&["ablate", "--out", out, "--seed", "0", "--set", "train.steps=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 5 * 3);
    for mode in [
        "full",
        "vanilla",
        "no-informative",
        "no-informative-no-projection-add",
        "no-projection-loss",
    ] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{mode},"))).count(), 3);
    }
}

#[test]
fn inspect_clamps_top_to_the_bank_size() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(dir.path(), 1, &[])), 0);
    let ckpt = dir.path().join("checkpoint_1.mttn");
    let o = multitrain(&[
        "inspect-projections",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--pair",
        "0:1",
        "--top",
        "1000",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning: --top 1000"), "{}", stderr(&o));
    let table = stdout(&o);
    let ranked = table
        .lines()
        .filter(|l| l.trim_start().chars().next().is_some_and(|c| c.is_ascii_digit()))
        .count();
    assert_eq!(ranked, 16, "{table}");
    assert!(dir.path().join("projections_kin_mit.csv").exists());

    let zero = multitrain(&[
        "inspect-projections",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--top",
        "0",
    ]);
    assert_eq!(code(&zero), 1);
}

#[test]
fn dump_dataset_writes_an_index() {
    let dir = tempfile::tempdir().unwrap();
    let o = multitrain(&[
        "dump-dataset",
        "--out",
        dir.path().to_str().unwrap(),
        "--split",
        "test",
        "--set",
        "datasets.test=[4,4,4]",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let index: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("index.json")).unwrap()).unwrap();
    let samples = index["samples"].as_object().unwrap();
    assert_eq!(samples.len(), 12);
    assert!(samples.values().all(|s| s["split"] == "test"));
    assert_eq!(index["datasets"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("dataset.mttn").exists());
}

#[test]
fn help_lists_the_modes_and_exit_codes() {
    let o = multitrain(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    for needle in ["no-informative-no-projection-add", "no-projection-loss", "Exit codes"] {
        assert!(text.contains(needle));
    }
}
