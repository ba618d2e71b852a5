#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_geoattack")
}

/// Runs the CLI with `--out dir` and an optional config file.
pub fn run(dir: &Path, config: Option<&Path>, jobs: usize, args: &[&str]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.arg("--out").arg(dir).arg("--jobs").arg(jobs.to_string());
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.args(args).output().expect("spawn geoattack")
}

pub fn run_ok(dir: &Path, config: Option<&Path>, jobs: usize, args: &[&str]) -> String {
    let out = run(dir, config, jobs, args);
    assert!(
        out.status.success(),
        "geoattack {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A small but complete experiment: six classes at 8x8, a few epochs, a
/// handful of evaluation inputs.
pub fn tiny_config() -> Value {
    json!({
        "seed": 11,
        "dataset": {"classes": 6, "per_class": 24, "size": 8},
        "zoo": {
            "train": {"epochs": 8, "batch_size": 16, "learning_rate": 0.02, "momentum": 0.9, "decay_last_third": true},
            "autoencoder": {"epochs": 2, "batch_size": 16, "learning_rate": 0.5, "momentum": 0.9, "decay_last_third": true},
            "accuracy_gate": 0.0,
            "reconstruction_gate": 1.0
        },
        "evaluation_inputs": 4,
        "transfer": {"epsilon": 16.0, "iterations": 3},
        "linf": {"epsilon": 16.0, "iterations": 2},
        "fsa": {"iterations": 2},
        "sub_procedures": 3,
        "eta_grid": [0.05, 0.3, 0.6]
    })
}

pub fn write_config(dir: &Path, value: &Value) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let path = dir.join("experiment.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn digest_tree(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let hash = Sha256::digest(std::fs::read(&path).unwrap());
                out.insert(rel, hash.iter().map(|b| format!("{b:02x}")).collect());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Every subcommand in pipeline order.
pub const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["train-zoo"],
    &["transfer-matrix"],
    &["attack", "--mode", "ga"],
    &["attack", "--mode", "fixed"],
    &["attack", "--mode", "ga", "--family", "fsa"],
    &["attack", "--mode", "fixed", "--family", "fsa"],
    &["partition-search", "--measure"],
];

/// Runs the whole pipeline (plus `score`) into `dir`.
pub fn run_pipeline(dir: &Path, config: &Path, jobs: usize) {
    for args in PIPELINE {
        run_ok(dir, Some(config), jobs, args);
    }
    let adv = dir.join("attack-ga-linf").join("adversarial.bin");
    run_ok(dir, Some(config), jobs, &["score", "--input", adv.to_str().unwrap()]);
}
