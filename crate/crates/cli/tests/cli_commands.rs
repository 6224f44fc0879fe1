use std::path::Path;
use std::process::Command;

fn cedd(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cedd")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cedd(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_sample_bound_and_spellcheck_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus.txt");
    let text = "the quick brown fox jumps over the lazy dog. ".repeat(60);
    std::fs::write(&corpus, &text).unwrap();
    let ck = dir.path().join("model.ckpt");
    let log = dir.path().join("log.csv");
    let sets = ["--set", "train.steps=40", "--set", "model.length=16", "--set", "model.family=roulette"];
    let mut train = vec!["train", "--corpus", arg(&corpus), "--out", arg(&ck), "--log", arg(&log)];
    train.extend_from_slice(&sets);
    train.extend_from_slice(&["--set", "model.schedule=roulette-loglinear"]);
    ok(&train);
    let log_text = std::fs::read_to_string(&log).unwrap();
    assert!(log_text.lines().any(|l| l == "step,loss,weight"));
    assert_eq!(log_text.lines().filter(|l| !l.starts_with('#')).count(), 41);

    let samples = dir.path().join("samples.txt");
    ok(&["sample", "--checkpoint", arg(&ck), "--out", arg(&samples), "--set", "sample.count=3", "--set", "sample.steps=8"]);
    assert_eq!(std::fs::read_to_string(&samples).unwrap().matches("%% sample").count(), 3);

    let results = dir.path().join("results.csv");
    ok(&["eval-bound", "--checkpoint", arg(&ck), "--corpus", arg(&corpus), "--out", arg(&results), "--set", "bound.samples=64"]);
    let csv = std::fs::read_to_string(&results).unwrap();
    assert!(csv.contains("J1") && csv.contains("J2"));

    let noisy = dir.path().join("noisy.txt");
    ok(&["contaminate", "--input", arg(&corpus), "--out", arg(&noisy), "--rate", "0.05", "--seed", "3"]);
    let fixed = dir.path().join("fixed.txt");
    ok(&["spellcheck", "--checkpoint", arg(&ck), "--input", arg(&noisy), "--reference", arg(&corpus), "--out", arg(&fixed)]);
    assert_eq!(std::fs::read_to_string(&fixed).unwrap().chars().count(), text.chars().count());
}

#[test]
fn bad_override_is_reported() {
    let out = cedd(&["verify", "--seed", "x"]);
    assert!(!out.status.success());
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "abc ".repeat(100)).unwrap();
    let ck = dir.path().join("m.ckpt");
    let out = cedd(&["train", "--corpus", arg(&corpus), "--out", arg(&ck), "--set", "model.nonsense=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn verify_passes() {
    ok(&["verify", "--seed", "1"]);
}
