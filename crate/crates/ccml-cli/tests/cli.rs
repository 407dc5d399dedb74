//! End-to-end tests of the command-line interface, driving the built binary.

use std::path::Path;
use std::process::{Command, Output};

use ccml::eval::{load_predictions, micro_metrics, MetricsReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ccml"))
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin()
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate_pair(dir: &Path) {
    assert_success(&run_in(
        dir,
        &[
            "generate", "--samples", "120", "--features", "8", "--classes", "5", "--seed", "1",
            "--task-seed", "9", "--out", "data/train",
        ],
    ));
    assert_success(&run_in(
        dir,
        &[
            "generate", "--samples", "60", "--features", "8", "--classes", "5", "--seed", "2",
            "--task-seed", "9", "--out", "data/val",
        ],
    ));
}

const TRAIN_ARGS: &[&str] = &[
    "--epochs", "6", "--batch-size", "16", "--hidden", "16,8",
    "--lambda1", "0.05", "--lambda2", "0.05",
];

#[test]
fn generate_writes_both_files_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    generate_pair(dir.path());
    for name in [
        "data/train.csv",
        "data/train.manifest.json",
        "data/train.run.json",
        "data/val.csv",
    ] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    assert_success(&run_in(
        dir.path(),
        &[
            "generate", "--samples", "120", "--features", "8", "--classes", "5", "--seed", "1",
            "--task-seed", "9", "--out", "data/train_again",
        ],
    ));
    let a = std::fs::read(dir.path().join("data/train.csv")).unwrap();
    let b = std::fs::read(dir.path().join("data/train_again.csv")).unwrap();
    assert_eq!(a, b, "same spec must produce identical files");
}

#[test]
fn generate_rejects_single_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "generate", "--samples", "50", "--features", "4", "--classes", "1", "--seed", "3",
            "--out", "data/bad",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn corrupt_adds_noise_mask_columns() {
    let dir = tempfile::tempdir().unwrap();
    generate_pair(dir.path());
    let before = std::fs::read_to_string(dir.path().join("data/train.csv")).unwrap();
    assert!(!before.lines().next().unwrap().contains("nm_0"));
    assert_success(&run_in(
        dir.path(),
        &[
            "corrupt", "--in", "data/train", "--noise", "50", "--seed", "7", "--out",
            "data/noisy",
        ],
    ));
    let after = std::fs::read_to_string(dir.path().join("data/noisy.csv")).unwrap();
    assert!(after.lines().next().unwrap().contains("nm_0"));
    // 50% of 120 samples, 50% of 5 classes -> 60 samples x 2 cells
    let flips: usize = after
        .lines()
        .skip(1)
        .map(|line| {
            line.rsplit(',')
                .take(5)
                .filter(|cell| *cell == "1")
                .count()
        })
        .sum();
    assert_eq!(flips, 120);
}

#[test]
fn corrupt_missing_input_fails_as_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["corrupt", "--in", "data/nope", "--noise", "10", "--seed", "1"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    generate_pair(dir.path());
    assert_success(&run_in(
        dir.path(),
        &["corrupt", "--in", "data/train", "--noise", "40", "--seed", "7"],
    ));
    for out_dir in ["runs/a", "runs/b"] {
        let mut args = vec![
            "train", "--mode", "ccml", "--train", "data/train", "--val", "data/val", "--out",
            out_dir,
        ];
        args.extend_from_slice(TRAIN_ARGS);
        assert_success(&run_in(dir.path(), &args));
    }
    for name in ["run.json", "metrics.csv", "f.ckpt", "g.ckpt", "flips.jsonl", "detection.json"] {
        assert!(dir.path().join("runs/a").join(name).exists(), "{name} missing");
    }
    let a = std::fs::read(dir.path().join("runs/a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.path().join("runs/b/metrics.csv")).unwrap();
    assert_eq!(a, b, "identical configs must give identical metrics");
    let ckpt_a = std::fs::read(dir.path().join("runs/a/f.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir.path().join("runs/b/f.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn train_rejects_invalid_config_file() {
    let dir = tempfile::tempdir().unwrap();
    generate_pair(dir.path());
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"retain_fraction": 0.0}"#,
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train", "--mode", "baseline", "--train", "data/train", "--out", "runs/x",
            "--config", "bad.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_flags_and_subcommands_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["generate", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run_in(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = run_in(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn eval_metrics_are_reproducible_from_predictions() {
    let dir = tempfile::tempdir().unwrap();
    generate_pair(dir.path());
    let mut args = vec![
        "train", "--mode", "baseline", "--train", "data/train", "--val", "data/val", "--out",
        "runs/base",
    ];
    args.extend_from_slice(TRAIN_ARGS);
    assert_success(&run_in(dir.path(), &args));
    assert_success(&run_in(
        dir.path(),
        &["eval", "--run", "runs/base", "--data", "data/val", "--out", "runs/base/eval"],
    ));

    let report_text =
        std::fs::read_to_string(dir.path().join("runs/base/eval/metrics.json")).unwrap();
    let report: MetricsReport = serde_json::from_str(&report_text).unwrap();
    let (_, _, yhat) =
        load_predictions(&dir.path().join("runs/base/eval/predictions.csv")).unwrap();
    let truth = ccml::datagen::load(&dir.path().join("data/val")).unwrap().y;
    let recomputed = micro_metrics(&yhat, &truth).unwrap();
    assert_eq!(recomputed, report.micro);
}

#[test]
fn experiment_cells_match_independent_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "experiment", "--rates", "40", "--seeds", "3", "--samples", "100", "--val-samples",
        "50", "--features", "8", "--classes", "5", "--out", "exp",
    ];
    args.extend_from_slice(TRAIN_ARGS);
    let out = run_in(dir.path(), &args);
    assert_success(&out);
    for name in ["exp/plan.json", "exp/report.csv", "exp/report.txt"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let report = std::fs::read_to_string(dir.path().join("exp/report.csv")).unwrap();
    let header = report.lines().next().unwrap();
    assert!(header.contains("delta_f1_mean"));
    assert!(header.contains("ccml_f1_mean"));
    assert_eq!(report.lines().count(), 2);

    // replaying a cell's recorded config on its recorded data reproduces it
    for mode in ["baseline", "ccml"] {
        let cell = dir.path().join(format!("exp/cells/rate40_seed3_{mode}"));
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(cell.join("run.json")).unwrap())
                .unwrap();
        let config = meta["config"].clone();
        let train_data = config["train_data"].as_str().unwrap().to_string();
        let val_data = config["val_data"].as_str().unwrap().to_string();
        std::fs::write(
            dir.path().join("replay.json"),
            serde_json::to_string(&config).unwrap(),
        )
        .unwrap();
        let replay_dir = format!("replay_{mode}");
        assert_success(&run_in(
            dir.path(),
            &[
                "train", "--config", "replay.json", "--train", &train_data, "--val", &val_data,
                "--out", &replay_dir,
            ],
        ));
        let original = std::fs::read(cell.join("metrics.csv")).unwrap();
        let replayed = std::fs::read(dir.path().join(&replay_dir).join("metrics.csv")).unwrap();
        assert_eq!(original, replayed, "{mode} cell must replay bit-exactly");
    }
}

#[test]
fn experiment_rejects_empty_rates() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["experiment", "--rates", "", "--seeds", "1", "--out", "exp"],
    );
    assert_eq!(out.status.code(), Some(1));
    let out = run_in(
        dir.path(),
        &["experiment", "--rates", "120", "--seeds", "1", "--out", "exp"],
    );
    assert_eq!(out.status.code(), Some(1));
}
