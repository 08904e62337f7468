#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub const BIN: &str = env!("CARGO_BIN_EXE_teach-detr");

/// Runs the binary inside `dir` with logging silenced.
pub fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env("TEACH_DETR_LOG", "off").output().expect("binary runs")
}

pub fn run_ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn digests(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let bytes = std::fs::read(&p).unwrap();
                let hex: String = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), hex);
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// A tiny end-to-end pipeline touching every command; writes into `dir`.
pub fn pipeline(dir: &Path) {
    let small = "epochs = 3\nbatch_size = 4\n[model]\nhidden = 32\n[export]\nmax_boxes = 10\n";
    std::fs::write(dir.join("small.toml"), small).unwrap();
    run_ok(dir, &["gen-data", "--out", "train.jsonl", "--scenes", "24", "--seed", "1", "--max-objects", "3"]);
    run_ok(dir, &["gen-data", "--out", "val.jsonl", "--scenes", "12", "--seed", "2", "--max-objects", "3"]);
    let common = ["--data", "train.jsonl", "--val", "val.jsonl", "--config", "small.toml"];
    let mut args = vec!["train-teacher"];
    args.extend(common);
    args.extend([
        "--out",
        "teacher.ckpt",
        "--log",
        "teacher.log",
        "--match-log",
        "teacher.match",
        "--metrics",
        "teacher.json",
    ]);
    run_ok(dir, &args);
    run_ok(
        dir,
        &[
            "export-boxes",
            "--data",
            "train.jsonl",
            "--checkpoint",
            "teacher.ckpt",
            "--out",
            "boxes.jsonl",
            "--config",
            "small.toml",
        ],
    );
    let mut args = vec!["train-student"];
    args.extend(common);
    args.extend(["--teacher-boxes", "boxes.jsonl", "--out", "student.ckpt", "--log", "student.log"]);
    args.extend(["--match-log", "student.match", "--metrics", "student.json"]);
    run_ok(dir, &args);
    let mut args = vec!["train-student"];
    args.extend(common);
    args.extend(["--online-teacher", "teacher.ckpt", "--out", "online.ckpt", "--log", "online.log"]);
    run_ok(dir, &args);
    run_ok(dir, &["eval", "--data", "val.jsonl", "--checkpoint", "student.ckpt", "--report", "eval.json"]);
    run_ok(dir, &["stats", "--data", "train.jsonl", "--teacher-boxes", "boxes.jsonl", "--out", "stats.json"]);
    run_ok(
        dir,
        &[
            "ablate",
            "--suite",
            "fig7",
            "--data",
            "train.jsonl",
            "--val",
            "val.jsonl",
            "--teachers",
            "boxes.jsonl",
            "--seeds",
            "2",
            "--config",
            "small.toml",
            "--epochs",
            "2",
            "--out",
            "ablation",
        ],
    );
}
