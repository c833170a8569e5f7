use std::path::Path;
use std::process::{Command, Output};

fn faircap(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faircap"))
        .current_dir(dir)
        .args(args)
        .env_remove("FAIRCAP_API_KEY")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = faircap(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

/// Runs the whole mock pipeline in `dir`.
fn pipeline(dir: &Path) {
    let bias = "male=0.5,black=0.5";
    ok(dir, &["synth", "--n", "600", "--seed", "11", "--out", "cohort.csv"]);
    ok(
        dir,
        &[
            "split",
            "--input",
            "cohort.csv",
            "--seed",
            "11",
            "--train",
            "train.csv",
            "--test",
            "test.csv",
        ],
    );
    ok(
        dir,
        &[
            "train-baseline",
            "--train",
            "train.csv",
            "--seed",
            "11",
            "--out",
            "model.toml",
        ],
    );
    ok(
        dir,
        &[
            "predict",
            "--cohort",
            "test.csv",
            "--model",
            "model.toml",
            "--out",
            "baseline.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "predict",
            "--cohort",
            "train.csv",
            "--strategy",
            "base",
            "--mock",
            "--bias",
            bias,
            "--out",
            "train_preds.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "build-cases",
            "--train",
            "train.csv",
            "--predictions",
            "train_preds.jsonl",
            "--mock",
            "--bias",
            bias,
            "--out",
            "repo.jsonl",
        ],
    );
    for s in ["base", "fairness", "system2"] {
        ok(
            dir,
            &[
                "predict",
                "--cohort",
                "test.csv",
                "--strategy",
                s,
                "--mock",
                "--bias",
                bias,
                "--out",
                &format!("{s}.jsonl"),
            ],
        );
    }
    ok(
        dir,
        &[
            "predict",
            "--cohort",
            "test.csv",
            "--strategy",
            "cap",
            "--mock",
            "--bias",
            bias,
            "--repository",
            "repo.jsonl",
            "--out",
            "cap.jsonl",
        ],
    );
    ok(
        dir,
        &[
            "evaluate",
            "--predictions",
            "baseline.jsonl",
            "base.jsonl",
            "fairness.jsonl",
            "system2.jsonl",
            "cap.jsonl",
            "--out",
            "report.json",
        ],
    );
}

fn without_timestamp(report: &str) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_str(report).unwrap();
    v["provenance"]["generated_at"] = serde_json::Value::Null;
    v
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for f in [
        "cohort.csv",
        "train.csv",
        "test.csv",
        "model.toml",
        "baseline.jsonl",
        "train_preds.jsonl",
        "repo.jsonl",
        "base.jsonl",
        "cap.jsonl",
        "cohort.csv.meta.json",
    ] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f} differs between runs");
    }
    assert_eq!(
        without_timestamp(&read(a.path(), "report.json")),
        without_timestamp(&read(b.path(), "report.json"))
    );
    let text = ok(a.path(), &["report", "--input", "report.json"]);
    assert!(text.contains("male vs female"));
    assert!(text.contains("logistic baseline"));
    let csv = ok(a.path(), &["report", "--input", "report.json", "--format", "csv"]);
    assert!(csv.starts_with("method,subgroup,n,positives,auroc,tpr,fpr\n"));
    assert!(csv.lines().count() > 5 * 25);
}

#[test]
fn every_prediction_row_carries_seed_and_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "50", "--seed", "3", "--out", "c.csv"]);
    ok(
        dir.path(),
        &[
            "predict",
            "--cohort",
            "c.csv",
            "--seed",
            "3",
            "--strategy",
            "fairness",
            "--mock",
            "--out",
            "p.jsonl",
        ],
    );
    for line in read(dir.path(), "p.jsonl").lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["seed"], 3);
        assert_eq!(v["config_hash"].as_str().unwrap().len(), 12);
        assert!(v["prompt_hash"].is_string());
        assert_eq!(v["method"], "fairness");
    }
    let meta: serde_json::Value = serde_json::from_str(&read(dir.path(), "c.csv.meta.json")).unwrap();
    assert_eq!(meta["seed"], 3);
}

#[test]
fn default_outputs_land_in_a_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "20"]);
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    let run = runs[0].as_ref().unwrap().path();
    assert!(run.file_name().unwrap().to_str().unwrap().starts_with("run-"));
    assert!(run.join("cohort.csv").exists());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(faircap(d, &["no-such-verb"]).status.code(), Some(1));
    assert_eq!(
        faircap(d, &["predict", "--cohort", "missing.csv", "--mock"])
            .status
            .code(),
        Some(1)
    );
    std::fs::write(d.join("bad.toml"), "threshold = 7\n").unwrap();
    assert_eq!(
        faircap(d, &["--config", "bad.toml", "synth", "--n", "5"]).status.code(),
        Some(1)
    );
    std::fs::write(d.join("bad.csv"), "id,age\nP1,40\n").unwrap();
    assert_eq!(
        faircap(d, &["ingest", "--input", "bad.csv", "--out", "x.csv"])
            .status
            .code(),
        Some(2)
    );
    ok(d, &["synth", "--n", "10", "--out", "c.csv"]);
    let out = faircap(d, &["predict", "--cohort", "c.csv", "--endpoint", "--out", "p.jsonl"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAIRCAP_API_KEY"));
    assert!(!d.join("p.jsonl").exists());
    assert_eq!(faircap(d, &["--help"]).status.code(), Some(0));
}
