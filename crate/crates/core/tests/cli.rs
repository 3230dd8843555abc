mod common;

use std::path::Path;
use std::process::{Command, Output};

use lada::dataset::{load_manifest, save_manifest, BBox, Domain};
use lada::metrics::{save_detections, Detection};

fn lada(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lada"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn summary(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

const SUBCOMMANDS: [(&str, &[&str]); 7] = [
    (
        "synth",
        &["--out", "--n-source", "--n-target", "--per-scene", "--seed"],
    ),
    (
        "split",
        &[
            "--manifest",
            "--out",
            "--protocol",
            "--val-fraction",
            "--source-scenes",
            "--camera-mode",
        ],
    ),
    ("merge-labels", &["--manifest", "--out"]),
    (
        "train-stage1",
        &[
            "--source",
            "--images",
            "--config",
            "--epochs",
            "--metrics",
            "--out",
            "--detector",
        ],
    ),
    (
        "train-stage2",
        &[
            "--source",
            "--target-labeled",
            "--target-unlabeled",
            "--init",
            "--student-out",
            "--out",
        ],
    ),
    (
        "eval",
        &[
            "--manifest",
            "--detections",
            "--checkpoint",
            "--images",
            "--out",
        ],
    ),
    ("export", &["--manifest", "--out"]),
];

#[test]
fn every_subcommand_documents_its_flags() {
    let dir = tempfile::tempdir().unwrap();
    let top = lada(&["--help"], dir.path());
    assert_eq!(top.status.code(), Some(0));
    let top = String::from_utf8_lossy(&top.stdout).to_string();
    for (name, flags) in SUBCOMMANDS {
        assert!(top.contains(name), "{name} missing from top-level help");
        let out = lada(&[name, "--help"], dir.path());
        assert_eq!(out.status.code(), Some(0), "{name}");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in flags {
            assert!(text.contains(flag), "{name} --help lacks {flag}");
        }
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        lada(&["eval", "--no-such-flag"], dir.path()).status.code(),
        Some(1)
    );
    assert_eq!(lada(&["frobnicate"], dir.path()).status.code(), Some(1));
    let bad_protocol = lada(
        &[
            "split",
            "--manifest",
            "m.jsonl",
            "--out",
            "o",
            "--protocol",
            "2",
        ],
        dir.path(),
    );
    assert_eq!(bad_protocol.status.code(), Some(1));
}

#[test]
fn unreadable_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = lada(
        &["export", "--manifest", "absent.jsonl", "--out", "c.json"],
        dir.path(),
    );
    assert_eq!(missing.status.code(), Some(2));
    assert!(summary(&missing)["error"].is_string());
    std::fs::write(dir.path().join("junk.jsonl"), "{not json\n").unwrap();
    let junk = lada(
        &[
            "merge-labels",
            "--manifest",
            "junk.jsonl",
            "--out",
            "m.jsonl",
        ],
        dir.path(),
    );
    assert_eq!(junk.status.code(), Some(2));
}

#[test]
fn merge_labels_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![
        common::record(
            "a",
            vec![
                BBox::from_corners(0, [1.0, 1.0, 3.0, 4.0]),
                BBox::from_corners(0, [2.0, 0.0, 6.0, 2.0]),
            ],
            Domain::Source,
            8,
        ),
        common::record("b", vec![], Domain::Source, 8),
    ];
    save_manifest(&common::manifest(recs, "all"), dir.path().join("m.jsonl")).unwrap();
    assert_eq!(
        lada(
            &[
                "merge-labels",
                "--manifest",
                "m.jsonl",
                "--out",
                "once.jsonl"
            ],
            dir.path()
        )
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        lada(
            &[
                "merge-labels",
                "--manifest",
                "once.jsonl",
                "--out",
                "twice.jsonl"
            ],
            dir.path()
        )
        .status
        .code(),
        Some(0)
    );
    let once = std::fs::read(dir.path().join("once.jsonl")).unwrap();
    let twice = std::fs::read(dir.path().join("twice.jsonl")).unwrap();
    assert_eq!(once, twice);
    let merged = load_manifest(dir.path().join("once.jsonl")).unwrap();
    assert_eq!(
        merged.records[0].boxes,
        vec![BBox::from_corners(0, [1.0, 0.0, 6.0, 4.0])]
    );
}

#[test]
fn ground_truth_detections_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let mut images = lada::imagery::MemoryImages::default();
    let recs = common::mini_set(10, "g", Domain::Target, 4, &mut images);
    let dets: Vec<Detection> = recs
        .iter()
        .flat_map(|r| {
            r.boxes.iter().map(|b| Detection {
                image_id: r.image_id.clone(),
                bbox: *b,
                score: 0.9,
            })
        })
        .collect();
    assert!(!dets.is_empty());
    save_manifest(&common::manifest(recs, "gt"), dir.path().join("gt.jsonl")).unwrap();
    save_detections(&dets, dir.path().join("d.jsonl")).unwrap();
    let out = lada(
        &[
            "eval",
            "--manifest",
            "gt.jsonl",
            "--detections",
            "d.jsonl",
            "--out",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    let s = summary(&out);
    assert_eq!(s["map_50_95"], 1.0);
    assert_eq!(s["map_50"], 1.0);
    assert!(dir.path().join("r.json").exists());
}

#[test]
fn data_dir_resolves_relative_paths() {
    let dir = tempfile::tempdir().unwrap();
    let recs = vec![common::record(
        "a",
        vec![BBox::from_corners(0, [0.0, 0.0, 4.0, 4.0])],
        Domain::Source,
        8,
    )];
    save_manifest(&common::manifest(recs, "all"), dir.path().join("m.jsonl")).unwrap();
    let elsewhere = tempfile::tempdir().unwrap();
    let base = dir.path().to_str().unwrap();
    let out = lada(
        &[
            "--data-dir",
            base,
            "export",
            "--manifest",
            "m.jsonl",
            "--out",
            "coco.json",
        ],
        elsewhere.path(),
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("coco.json").exists());
}
