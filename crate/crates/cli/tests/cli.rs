//! Drives the `frugal` binary end to end on small data.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_frugal");

const FAST_TRAIN: &str = "[train]\nmax_epochs = 15\nflow_layers = 1\nnn_width = 8\nnn_depth = 1\nbatch_size = 256\nseed = 4\n";

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("frugal-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn frugal(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env("FRUGAL_LOG", "error").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn check(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Simulated source data plus a fitted model directory.
fn fitted(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("source.csv");
    let out = frugal(&["simulate-dgp", "--builtin", "logistic-source", "--n", "800", "--seed", "2", "--out", s(&data)]);
    let stdout = check(&out);
    assert!(stdout.contains("true_ate,"), "{stdout}");
    let cfg = dir.join("fit.ini");
    fs::write(&cfg, FAST_TRAIN).unwrap();
    let model_dir = dir.join("model");
    check(&frugal(&["fit", s(&data), "--config", s(&cfg), "--out", s(&model_dir)]));
    (data, model_dir.join("model.ffm"))
}

#[test]
fn pipeline_round_trip() {
    let dir = scratch("pipeline");
    let (data, model) = fitted(&dir);
    let losses = fs::read_to_string(model.with_file_name("losses.csv")).unwrap();
    assert!(losses.starts_with("model,epoch,train_loss,val_loss,best\n"));
    assert!(losses.contains("\nfrugal,1,") && losses.contains("\npropensity,1,"));

    let spec = dir.join("bench.ini");
    fs::write(&spec, "[benchmark]\nn = 300\nseed = 9\nrho = 0.2\nmargin = logistic\nbeta = 2\nc = -1\n").unwrap();
    let bench = dir.join("bench.csv");
    check(&frugal(&["generate", "--model", s(&model), "--config", s(&spec), "--out", s(&bench), "--replicates", "2"]));
    let first = dir.join("bench_000.csv");
    let second = dir.join("bench_001.csv");
    assert_eq!(fs::read_to_string(&first).unwrap().lines().count(), 301);
    assert_ne!(fs::read(&first).unwrap(), fs::read(&second).unwrap());

    // the sidecar alone reproduces the file
    let meta = dir.join("bench_000.csv.meta");
    let text = fs::read_to_string(&meta).unwrap();
    assert!(text.contains("margin = logistic") && text.contains("seed = 9"), "{text}");
    let again = dir.join("again.csv");
    check(&frugal(&["generate", "--model", s(&model), "--config", s(&meta), "--out", s(&again)]));
    assert_eq!(fs::read(&again).unwrap(), fs::read(&first).unwrap());

    let table = dir.join("table.csv");
    check(&frugal(&["evaluate", s(&first), s(&second), "--out", s(&table)]));
    let table = fs::read_to_string(&table).unwrap();
    assert!(table.starts_with("dataset,method,estimate,stderr,lower,upper,n\n"));
    for method in ["dom", "or", "ipw-logistic", "logistic-or"] {
        assert_eq!(table.lines().filter(|l| l.split(',').nth(1) == Some(method)).count(), 3, "{method}\n{table}");
    }
    assert!(table.lines().any(|l| l.starts_with("pooled,dom,")));

    let stdout = check(&frugal(&["diagnose", s(&data), s(&first)]));
    let d: f64 = stdout.trim().strip_prefix("max_abs_difference,").unwrap().parse().unwrap();
    assert!((0.0..=2.0).contains(&d));
}

#[test]
fn fitting_is_deterministic() {
    let dir = scratch("determinism");
    let (data, model) = fitted(&dir);
    let cfg = dir.join("fit.ini");
    let other = dir.join("refit");
    check(&frugal(&["fit", s(&data), "--config", s(&cfg), "--out", s(&other)]));
    assert_eq!(fs::read(&model).unwrap(), fs::read(other.join("model.ffm")).unwrap());

    let reseeded = dir.join("reseeded");
    check(&frugal(&["fit", s(&data), "--config", s(&cfg), "--seed", "99", "--out", s(&reseeded)]));
    assert_ne!(fs::read(&model).unwrap(), fs::read(reseeded.join("model.ffm")).unwrap());
}

#[test]
fn invalid_input_exits_with_code_two() {
    let dir = scratch("exit-codes");
    assert_eq!(frugal(&["fit"]).status.code(), Some(2));
    assert_eq!(frugal(&["evaluate"]).status.code(), Some(2));

    let bad = dir.join("bad.ini");
    fs::write(&bad, "[train]\nlearning_rat = 0.1\n").unwrap();
    let data = dir.join("d.csv");
    check(&frugal(&["simulate-dgp", "--builtin", "m1", "--n", "200", "--out", s(&data)]));
    let out = frugal(&["fit", s(&data), "--config", s(&bad), "--out", s(&dir.join("m"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    // a missing file is an I/O failure, not a validation error
    let out = frugal(&["evaluate", s(&dir.join("missing.csv"))]);
    assert_eq!(out.status.code(), Some(1));

    // files with different columns cannot be pooled
    let other = dir.join("other.csv");
    check(&frugal(&["simulate-dgp", "--builtin", "m2", "--n", "200", "--out", s(&other)]));
    assert_eq!(frugal(&["evaluate", s(&data), s(&other)]).status.code(), Some(2));
    assert_eq!(frugal(&["diagnose", s(&data), s(&other)]).status.code(), Some(2));
}

#[test]
fn generate_rejects_bad_specs_and_foreign_metadata() {
    let dir = scratch("generate-errors");
    let (data, model) = fitted(&dir);
    let spec = dir.join("zero.ini");
    fs::write(&spec, "[benchmark]\nn = 0\nseed = 1\nrho = 0\nmargin = gaussian\ntau = 1\n").unwrap();
    let out = dir.join("x.csv");
    assert_eq!(frugal(&["generate", "--model", s(&model), "--config", s(&spec), "--out", s(&out)]).status.code(), Some(2));

    fs::write(&spec, "[benchmark]\nn = 10\nseed = 1\nrho = 1.5\nmargin = gaussian\ntau = 1\n").unwrap();
    assert_eq!(frugal(&["generate", "--model", s(&model), "--config", s(&spec), "--out", s(&out)]).status.code(), Some(2));

    fs::write(&spec, "[benchmark]\nn = 10\nseed = 1\nrho = 0\nmargin = gaussian\ntau = 1\n").unwrap();
    check(&frugal(&["generate", "--model", s(&model), "--config", s(&spec), "--out", s(&out)]));

    // metadata from one model must not be replayed against another
    let cfg = dir.join("fit.ini");
    let other = dir.join("other");
    check(&frugal(&["fit", s(&data), "--config", s(&cfg), "--seed", "5", "--out", s(&other)]));
    let meta = dir.join("x.csv.meta");
    let status = frugal(&["generate", "--model", s(&other.join("model.ffm")), "--config", s(&meta), "--out", s(&out)]);
    assert_eq!(status.status.code(), Some(2));

    // a truncated model file is rejected
    let broken = dir.join("broken.ffm");
    let bytes = fs::read(&model).unwrap();
    fs::write(&broken, &bytes[..bytes.len() / 2]).unwrap();
    assert_eq!(frugal(&["generate", "--model", s(&broken), "--config", s(&spec), "--out", s(&out)]).status.code(), Some(2));
}

#[test]
fn simulate_dgp_reads_a_config() {
    let dir = scratch("simulate");
    let cfg = dir.join("dgp.ini");
    fs::write(
        &cfg,
        "[dgp]\nmargins = normal(0,1) normal(0,1)\nspearman = 1 0.4 0.2; 0.4 1 0; 0.2 0 1\ntau = 2.5\npropensity_linear = 0.3 -0.2\n\n[simulate]\nn = 50\nseed = 3\n",
    )
    .unwrap();
    let out = dir.join("sim.csv");
    let stdout = check(&frugal(&["simulate-dgp", "--config", s(&cfg), "--out", s(&out)]));
    assert_eq!(stdout.trim(), "true_ate,2.5");
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("z1,z2,t,y"));
    assert_eq!(text.lines().count(), 51);
}
