//! End-to-end runs of the `btsdsn` binary.

use std::path::Path;
use std::process::{Command, Output};

fn btsdsn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btsdsn"))
        .current_dir(dir)
        .env_remove("BTSDSN_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_train_eval_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let common = [
        "--dataset",
        "SYNTHETIC",
        "--data-root",
        "data",
        "--widths",
        "toy",
        "--output-dir",
        "run",
        "--max-iterations",
        "16",
        "--set",
        "snapshot_every=8",
    ];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = extra.iter().chain(&common).copied().collect();
        let o = btsdsn(d, &args);
        assert!(o.status.success(), "{extra:?}: {}", stderr(&o));
        o
    };

    run(&["synth", "--out", "data", "--n", "6", "--size", "32"]);
    let o = run(&["prepare"]);
    assert!(stdout(&o).contains("4 train, 1 val, 1 test"), "{}", stdout(&o));
    run(&["train"]);
    for f in ["best.ckpt", "train_log.csv", "config.txt", "checkpoints/iter_0000016.ckpt"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(d.join("run/train_log.csv")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("# seed")), "config is embedded");

    let o = run(&["eval", "--checkpoint", "run/best.ckpt"]);
    assert!(stdout(&o).contains("AUC"), "{}", stdout(&o));

    run(&[
        "predict",
        "--checkpoint",
        "run/best.ckpt",
        "--image",
        "data/images/001_synth.png",
        "--mode",
        "patch",
        "--threshold",
        "0.5",
        "--out-prob",
        "prob.png",
        "--out-bin",
        "bin.png",
    ]);
    assert!(d.join("prob.png").is_file() && d.join("bin.png").is_file());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["--dataset", "KAGGLE", "augment-plan"][..],
        &["--set", "no_such_key=1", "model", "describe"],
        &["--set", "missing-equals", "model", "describe"],
        &["--threshold", "1.5", "model", "describe"],
        &["frobnicate"],
    ] {
        let o = btsdsn(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.ckpt"), b"not a checkpoint").unwrap();
    let o = btsdsn(
        dir.path(),
        &["predict", "--checkpoint", "bad.ckpt", "--image", "missing.png", "--threshold", "0.5"],
    );
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));

    let o = btsdsn(dir.path(), &["--dataset", "DRIVE", "--data-root", "nowhere", "prepare"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.cfg"), "variant = DSN\nwidths = toy\n").unwrap();
    let o = btsdsn(dir.path(), &["--config", "exp.cfg", "model", "describe"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dsn = stdout(&o);
    let o = btsdsn(dir.path(), &["--config", "exp.cfg", "--variant", "BTS-DSN", "model", "describe"]);
    let bts = stdout(&o);
    assert_ne!(dsn, bts);
    assert!(bts.contains("feat_conv1_fuse"), "{bts}");
    assert!(!dsn.contains("feat_conv1_fuse"));
}

#[test]
fn augment_plan_lists_each_transform() {
    let dir = tempfile::tempdir().unwrap();
    let o = btsdsn(dir.path(), &["--dataset", "STARE", "augment-plan"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = stdout(&o).lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, 40 + 1);
}
