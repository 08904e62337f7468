mod common;

use common::{digests, pipeline, run, run_ok};

#[test]
fn every_command_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (da, db) = (digests(a.path()), digests(b.path()));
    assert!(da.len() >= 18, "{:?}", da.keys());
    assert_eq!(da, db);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(d, &["gen-data", "--out", "x.jsonl", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(d, &["no-such-command"]).status.code(), Some(2));
    run_ok(d, &["gen-data", "--out", "s.jsonl", "--scenes", "3"]);
    let missing = run(d, &["eval", "--data", "s.jsonl", "--checkpoint", "nope.ckpt", "--report", "r.json"]);
    assert_eq!(missing.status.code(), Some(1));
    let bad_range = run(d, &["gen-data", "--out", "x.jsonl", "--min-objects", "4", "--max-objects", "2"]);
    assert_eq!(bad_range.status.code(), Some(2));
    let exclusive = run(
        d,
        &["train-student", "--data", "s.jsonl", "--out", "o.ckpt", "--teacher-boxes", "a", "--mean-teacher", "0.9"],
    );
    assert_eq!(exclusive.status.code(), Some(2));
}

#[test]
fn gen_data_summary_matches_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = run_ok(d, &["gen-data", "--out", "empty.jsonl", "--scenes", "0"]);
    assert_eq!(std::fs::read(d.join("empty.jsonl")).unwrap(), b"");
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "scenes=0 objects=0 per_class=[0,0,0]");

    let out = run_ok(d, &["gen-data", "--out", "s.jsonl", "--scenes", "40", "--classes", "4", "--seed", "7"]);
    let text = std::fs::read_to_string(d.join("s.jsonl")).unwrap();
    let mut hist = [0usize; 4];
    let mut scenes = 0;
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        scenes += 1;
        for o in v["objects"].as_array().unwrap() {
            hist[o["class"].as_u64().unwrap() as usize] += 1;
        }
    }
    let expected = format!(
        "scenes={scenes} objects={} per_class=[{}]",
        hist.iter().sum::<usize>(),
        hist.map(|h| h.to_string()).join(",")
    );
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), expected);
}

#[test]
fn reports_and_warnings() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    pipeline(d);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    for key in ["AP", "AP50", "AP75"] {
        let v = report[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key}={v}");
    }
    assert!(report["IS_per_epoch"].as_array().unwrap().is_empty());
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("student.json")).unwrap()).unwrap();
    assert_eq!(metrics["IS_per_epoch"].as_array().unwrap().len(), 2);
    assert_eq!(metrics["IS_aux_per_epoch"].as_array().unwrap().len(), 2);

    // an exported teacher file and the live checkpoint supervise identically
    assert_eq!(std::fs::read(d.join("student.ckpt")).unwrap(), std::fs::read(d.join("online.ckpt")).unwrap());

    // one teacher branch per --teacher-boxes flag
    let log = std::fs::read_to_string(d.join("student.log")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["branch_losses"].as_array().unwrap().len(), 2);
    let args = [
        "train-student",
        "--data",
        "train.jsonl",
        "--config",
        "small.toml",
        "--epochs",
        "1",
        "--teacher-boxes",
        "boxes.jsonl",
        "--teacher-boxes",
        "boxes.jsonl",
        "--out",
        "twice.ckpt",
        "--log",
        "twice.log",
    ];
    run_ok(d, &args);
    let log = std::fs::read_to_string(d.join("twice.log")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["branch_losses"].as_array().unwrap().len(), 3);

    let gt_only = run_ok(
        d,
        &[
            "train-student",
            "--data",
            "train.jsonl",
            "--config",
            "small.toml",
            "--epochs",
            "1",
            "--mode",
            "gt-only",
            "--teacher-boxes",
            "boxes.jsonl",
            "--out",
            "gt.ckpt",
        ],
    );
    assert!(String::from_utf8_lossy(&gt_only.stderr).contains("ignores all teacher flags"));

    let table = std::fs::read_to_string(d.join("ablation/table.md")).unwrap();
    for arm in ["all", "iou>0.1", "iou>0.3", "iou>0.5"] {
        assert!(table.contains(arm), "{table}");
    }
}
