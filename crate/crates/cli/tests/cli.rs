use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn draftflow(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_draftflow"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env_remove("DRAFTFLOW_OUT")
        .env_remove("DRAFTFLOW_GRAMMAR")
        .env("RUST_LOG", "error")
        .output()
        .expect("run draftflow")
}

#[test]
fn generate_corpus_writes_splits_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let first = draftflow(dir.path(), &["generate-corpus"]);
    assert!(first.status.success(), "{}", String::from_utf8_lossy(&first.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&first.stdout).unwrap();
    assert_eq!(summary["train"], 2000);
    let corpus = dir.path().join("corpus");
    let before = fs::read(corpus.join("train.tsv")).unwrap();
    assert!(draftflow(dir.path(), &["generate-corpus"]).status.success());
    assert_eq!(before, fs::read(corpus.join("train.tsv")).unwrap());
    assert!(corpus.join("val.tsv").exists() && corpus.join("vocab.txt").exists());
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[dims]\nwidth = 3\n").unwrap();
    let out = draftflow(dir.path(), &["--config", cfg.to_str().unwrap(), "generate-corpus"]);
    assert_eq!(out.status.code(), Some(2));
    let report = draftflow(dir.path(), &["eval", "--report", "nope"]);
    assert_eq!(report.status.code(), Some(2));
}

#[test]
fn missing_prerequisite_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    assert!(draftflow(dir.path(), &["generate-corpus"]).status.success());
    let out = draftflow(dir.path(), &["train", "--stage", "draftprior"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}
