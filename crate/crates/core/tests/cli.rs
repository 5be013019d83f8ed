//! Exit codes and outputs of the `alchemist` binary.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::{fixture, write_synthetic_corpus};

fn alchemist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alchemist")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn small_config(dir: &Path, extra: &str) -> String {
    write_synthetic_corpus(&dir.join("corpus.jsonl"), 30, Some(10)).unwrap();
    let config = format!(
        "seed = 7\n\n[[sources]]\nname = \"synthetic\"\npath = \"corpus.jsonl\"\n\n[executor]\ndry_run = true\n\n[decontam.embedder]\nkind = \"none\"\n\n[analysis]\ncpd = false\n{extra}"
    );
    let path = dir.join("alchemist.toml");
    std::fs::write(&path, config).unwrap();
    path.display().to_string()
}

#[test]
fn invalid_value_exits_2_and_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "\n[decontam]\njaccard_threshold = 1.7\n");
    let out = alchemist(&["--config", &config, "ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("decontam.jaccard_threshold"));
}

#[test]
fn unknown_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "\n[mix]\nshufle = true\n");
    let out = alchemist(&["--config", &config, "ingest"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shufle"));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let out_dir = dir.path().join("out").display().to_string();
    let out = alchemist(&["--config", &config, "--out", &out_dir, "mix"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn dry_run_writes_dataset_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let out_dir = dir.path().join("out");
    let out = alchemist(&["--config", &config, "--out", &out_dir.display().to_string(), "--dry-run", "run"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["dataset/train.jsonl", "dataset/train_messages.jsonl", "manifest.json", "training_config.json"] {
        assert!(out_dir.join(file).exists(), "{file}");
    }
    let rerun = alchemist(&["--config", &config, "--out", &out_dir.display().to_string(), "--dry-run", "run", "--from", "mix"]);
    assert_eq!(rerun.status.code(), Some(0));
    assert_eq!(out.stdout, rerun.stdout);
}

#[test]
fn errors_subcommand_tallies_a_failure_log() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path(), "");
    let out_dir = dir.path().join("out").display().to_string();
    let log = fixture("failure_log.jsonl").display().to_string();
    let out = alchemist(&["--config", &config, "--out", &out_dir, "errors", "--input", &log]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("WrongAnswer: 10 (20.0%)"), "{stdout}");
    assert!(dir.path().join("out/analysis/errors.json").exists());
}
