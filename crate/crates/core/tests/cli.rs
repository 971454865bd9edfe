use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn commentclf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_commentclf"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const CONFIG: &str = r#"
seed = 3
output_dir = "out"

[data]
train = "data/train.tsv"
dev = "data/dev.tsv"
test = "data/test.tsv"
language = "synthetic"

[rebalance]
strategy = "over_under"

[head]
kind = "logistic_regression"
grid = { c = [0.1, 1.0] }
"#;

fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    ok(commentclf(dir.path(), &["synthesize", "--out", "data", "--n", "300", "--vocab", "12", "--seed", "3"]));
    fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    dir
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = workspace();
    let d = dir.path();
    let prepared = ok(commentclf(d, &["prepare", "-c", "run.toml"]));
    assert!(prepared.contains("prepared 3 split(s)"), "{prepared}");

    let trained = ok(commentclf(d, &["train", "-c", "run.toml"]));
    assert!(trained.contains("dev macro-F1"), "{trained}");
    let run_dir = fs::read_dir(d.join("out/runs")).unwrap().next().unwrap().unwrap().path();
    let run = run_dir.to_str().unwrap();

    let evaluated = ok(commentclf(d, &["evaluate", "-c", "run.toml", "--artifact", run]));
    assert!(evaluated.contains("Logistic Regression"), "{evaluated}");
    assert!(d.join("out/reports/results_grid.txt").is_file());

    fs::write(d.join("in.txt"), "first line\nsecond\tignored\n").unwrap();
    let predicted = ok(commentclf(d, &["predict", "-c", "run.toml", "--artifact", run, "--input", "in.txt", "--output", "pred.tsv"]));
    assert!(predicted.contains("labeled 2 row(s)"), "{predicted}");
    assert_eq!(fs::read_to_string(d.join("pred.tsv")).unwrap().lines().count(), 2);
}

#[test]
fn config_errors_exit_with_two_and_name_the_field() {
    let dir = workspace();
    let out = commentclf(dir.path(), &["prepare", "-c", "run.toml", "--set", "head.folds=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("head"));

    let missing = commentclf(dir.path(), &["train", "-c", "run.toml"]);
    assert_eq!(missing.status.code(), Some(2), "training before prepare is a config error");
    assert!(String::from_utf8_lossy(&missing.stderr).contains("prepared"));
}

#[test]
fn changed_encoder_makes_the_artifact_incompatible() {
    let dir = workspace();
    let d = dir.path();
    ok(commentclf(d, &["prepare", "-c", "run.toml"]));
    ok(commentclf(d, &["train", "-c", "run.toml"]));
    let run_dir = fs::read_dir(d.join("out/runs")).unwrap().next().unwrap().unwrap().path();
    let run = run_dir.to_str().unwrap();
    let out = commentclf(d, &["evaluate", "-c", "run.toml", "--artifact", run, "--set", "encoder.dim=32"]);
    assert_eq!(out.status.code(), Some(2));
}
