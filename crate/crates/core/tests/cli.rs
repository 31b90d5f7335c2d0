use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proto_ood::datasets::{load_detection_dump, load_split};
use proto_ood::evaluator::{load_metrics_report, Protocol};
use proto_ood::trainer::load_checkpoint;

const SMALL: &[&str] = &[
    "--set",
    "synthetic.t=3",
    "--set",
    "synthetic.h=16",
    "--set",
    "synthetic.per_class=30",
    "--set",
    "synthetic.ood_per_cluster=20",
    "--set",
    "train.epochs=8",
    "--set",
    "train.lambda_start=3",
    "--set",
    "train.omega_gap=2",
    "--set",
    "train.d=6",
    "--set",
    "train.projection_hidden=16",
    "--set",
    "train.similarity_hidden=16",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proto-ood"))
        .args(args)
        .args(SMALL)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates data and trains once into `root/data` and `root/run`.
fn trained(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    let run_dir = root.join("run");
    ok(&["synth", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&run_dir)]);
    (data, run_dir.join("model.pockpt"))
}

#[test]
fn full_workflow_writes_consistent_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let run_dir = ckpt.parent().unwrap();

    for name in ["train", "id_eval", "ood_eval"] {
        load_split(data.join(format!("{name}.posplit"))).unwrap();
    }
    assert!(data.join("resolved_config.toml").exists());
    assert!(run_dir.join("resolved_config.toml").exists());
    let log = std::fs::read_to_string(run_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8);
    for line in log.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    let summary = std::fs::read_to_string(run_dir.join("train_summary.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&summary).unwrap();

    let eval_dir = dir.path().join("eval");
    let stdout = ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&eval_dir),
        "--id",
        s(&data.join("id_eval.posplit")),
        "--ood",
        s(&data.join("ood_eval.posplit")),
    ]);
    assert!(stdout.contains("protocol A") && stdout.contains("protocol B"));
    let a = load_metrics_report(eval_dir.join("metrics_a.pometrics")).unwrap();
    let b = load_metrics_report(eval_dir.join("metrics_b.pometrics")).unwrap();
    assert_eq!(a.protocol, Protocol::A);
    assert_eq!(b.protocol, Protocol::B);
    assert!(b.n_id <= a.n_id);
    assert_eq!(a.n_ood, b.n_ood);

    let only_b = dir.path().join("eval_b");
    ok(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&only_b),
        "--protocol",
        "b",
        "--set",
        &format!("paths.data_dir={:?}", s(&data)),
    ]);
    assert!(only_b.join("metrics_b.pometrics").exists());
    assert!(!only_b.join("metrics_a.pometrics").exists());
}

#[test]
fn score_decisions_follow_gamma_and_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let split = data.join("id_eval.posplit");

    let first = dir.path().join("s1");
    let second = dir.path().join("s2");
    ok(&[
        "score",
        "--checkpoint",
        s(&ckpt),
        "--split",
        s(&split),
        "--out",
        s(&first),
        "--gamma",
        "1.5",
    ]);
    ok(&[
        "score",
        "--checkpoint",
        s(&ckpt),
        "--split",
        s(&split),
        "--out",
        s(&second),
        "--gamma",
        "1.5",
    ]);
    let a = std::fs::read(first.join("id_eval.podump")).unwrap();
    let b = std::fs::read(second.join("id_eval.podump")).unwrap();
    assert_eq!(a, b);

    let groups = load_detection_dump(first.join("id_eval.podump")).unwrap();
    let n_records = load_split(&split).unwrap().len();
    assert_eq!(
        groups.iter().map(|g| g.predictions.len()).sum::<usize>(),
        n_records
    );
    for p in groups.iter().flat_map(|g| &g.predictions) {
        assert_eq!(p.decision, Some(p.ood_score >= 1.5));
    }
}

#[test]
fn rerunning_training_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained(dir.path());
    let again = dir.path().join("again");
    ok(&["train", "--data", s(&data), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(again.join("model.pockpt")).unwrap()
    );
    load_checkpoint(&ckpt).unwrap();
}

#[test]
fn ablation_flag_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("abl");
    ok(&["synth", "--out", s(&data)]);
    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&out),
        "--ablation",
        "no-con-no-neg",
    ]);
    let resolved = std::fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    assert!(
        resolved.contains("ablation = \"no_contrastive_no_neg\""),
        "{resolved}"
    );
}

#[test]
fn inspect_reports_prototypes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = trained(dir.path());
    let stdout = ok(&["inspect", "--checkpoint", s(&ckpt)]);
    assert!(stdout.contains("3 seen"), "{stdout}");
    assert!(stdout.contains("pairwise cosine"));
    assert!(!dir.path().join("run").join("inspect.txt").exists());

    let out = dir.path().join("inspect");
    ok(&["inspect", "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(
        std::fs::read_to_string(out.join("inspect.txt")).unwrap(),
        stdout
    );
}

#[test]
fn empty_synthetic_classes_still_produce_valid_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--out", s(&data), "--set", "synthetic.per_class=0"]);
    for name in ["train", "id_eval", "ood_eval"] {
        load_split(data.join(format!("{name}.posplit"))).unwrap();
    }
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.pockpt");

    let out = run(&["inspect", "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&[
        "synth",
        "--out",
        s(dir.path()),
        "--set",
        "train.no_such_key=1",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let garbage = dir.path().join("garbage.pockpt");
    std::fs::write(&garbage, "hello\n").unwrap();
    let out = run(&["inspect", "--checkpoint", s(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
}
