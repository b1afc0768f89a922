use std::fs;
use std::path::Path;
use std::process::Command;

use mpnn_cli::{
    cmd_eval, cmd_partition, cmd_pseudo, cmd_report, cmd_synth, cmd_train, sha256_hex, train_dir, EvalOptions,
    RunLock, TrainOptions,
};
use mpnn_core::config::RunConfig;
use mpnn_core::trainer::{Ablation, TrainMode};
use mpnn_core::Error;

fn small(root: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.output_dir = root.join("run");
    cfg.data.root = root.join("data");
    cfg.data.side = 32;
    cfg.data.rater = "rater1".parse().unwrap();
    cfg.eval.target = "clean".parse().unwrap();
    cfg.model.preset = "tiny".into();
    cfg.synth.train_count = 8;
    cfg.synth.test_count = 4;
    cfg.synth.side = 32;
    cfg.mpggd.k = 2;
    cfg.mpggd.phi = 0.0;
    cfg.mpggd.max_epochs = 1;
    cfg.noise_aware.perturbations = 2;
    cfg.recipe.epochs = 2;
    cfg.recipe.batch = 4;
    cfg.checkpoint_every = 2;
    cfg.validate().unwrap();
    cfg
}

fn opts(mode: TrainMode) -> TrainOptions {
    TrainOptions {
        mode,
        ablation: Ablation::None,
        name: None,
        resume: false,
    }
}

fn mpnn(root: &Path, cfg: &RunConfig, args: &[&str]) -> (i32, String) {
    let path = root.join("mpnn.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mpnn"))
        .arg("--config")
        .arg(&path)
        .args(args)
        .env_remove("MPNN_OUTPUT_DIR")
        .env_remove("MPNN_SEED")
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small(tmp.path());
    assert_eq!(mpnn(tmp.path(), &cfg, &["synth"]).0, 0);
    // Existing dataset without --force.
    assert_eq!(mpnn(tmp.path(), &cfg, &["synth"]).0, 2);
    assert_eq!(mpnn(tmp.path(), &cfg, &["synth", "--force"]).0, 0);
    assert_eq!(mpnn(tmp.path(), &cfg, &["--set", "recipe.epochs=oops", "report"]).0, 2);
    assert_eq!(mpnn(tmp.path(), &cfg, &["--set", "no.such.key=1", "report"]).0, 2);
    // Noise-aware training needs a partition store.
    assert_eq!(mpnn(tmp.path(), &cfg, &["train", "--mode", "mpnn"]).0, 2);
    cfg.mpggd.phi = 0.999;
    let (code, text) = mpnn(tmp.path(), &cfg, &["pseudo"]);
    assert_eq!(code, 3, "{text}");
}

#[test]
fn env_overrides_output_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    let path = tmp.path().join("mpnn.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    let elsewhere = tmp.path().join("elsewhere");
    let run = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_mpnn"))
            .arg("--config")
            .arg(&path)
            .args(args)
            .env("MPNN_OUTPUT_DIR", &elsewhere)
            .output()
            .unwrap()
            .status
    };
    assert!(run(&["synth"]).success());
    assert!(run(&["train", "--mode", "baseline"]).success());
    assert!(elsewhere.join("train/baseline/report.csv").exists());
    assert!(!cfg.output_dir.exists());
}

#[test]
fn lock_blocks_second_writer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    cmd_synth(&cfg, false).unwrap();
    let lock = RunLock::acquire(&cfg.output_dir).unwrap();
    assert!(matches!(cmd_train(&cfg, &opts(TrainMode::Baseline)), Err(Error::Config(_))));
    drop(lock);
    cmd_train(&cfg, &opts(TrainMode::Baseline)).unwrap();
    assert!(!cfg.output_dir.join(mpnn_cli::LOCK_FILE).exists());
}

#[test]
fn snapshot_and_hash_are_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    cmd_synth(&cfg, false).unwrap();
    let out = cmd_train(&cfg, &opts(TrainMode::Baseline)).unwrap();
    let text = fs::read_to_string(out.dir.join("config.toml")).unwrap();
    let hash = fs::read_to_string(out.dir.join("config.sha256")).unwrap();
    assert_eq!(hash.trim(), sha256_hex(text.as_bytes()));
    assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    let steps = fs::read_to_string(out.dir.join("metrics.jsonl")).unwrap().lines().count();
    assert_eq!(steps as u64, out.steps);
    let header = fs::read_to_string(out.dir.join("report.csv")).unwrap();
    assert!(header.starts_with("method,target,iou_disc,iou_cup,dice_disc,dice_cup"));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    cmd_synth(&cfg, false).unwrap();
    cmd_pseudo(&cfg).unwrap();
    cmd_partition(&cfg).unwrap();
    let full = cmd_train(&cfg, &opts(TrainMode::Mpnn)).unwrap();
    let read = |name: &str| fs::read(full.dir.join(name)).unwrap();
    let (model, state, log) = (read("model.ckpt"), read("state.ckpt"), read("metrics.jsonl"));

    // Pretend the process died right after the step-2 checkpoint.
    for name in ["model.ckpt", "state.ckpt", "report.csv"] {
        fs::remove_file(full.dir.join(name)).unwrap();
    }
    for e in fs::read_dir(full.dir.join("checkpoints")).unwrap() {
        let p = e.unwrap().path();
        if p.file_name().unwrap() != "step_00000002.ckpt" {
            fs::remove_file(p).unwrap();
        }
    }
    let resumed = cmd_train(&cfg, &TrainOptions { resume: true, ..opts(TrainMode::Mpnn) }).unwrap();
    assert_eq!(resumed.steps, full.steps);
    assert_eq!(read("model.ckpt"), model);
    assert_eq!(read("state.ckpt"), state);
    assert_eq!(read("metrics.jsonl"), log);

    let mut other = cfg.clone();
    other.recipe.lr0 *= 2.0;
    let err = cmd_train(&other, &TrainOptions { resume: true, ..opts(TrainMode::Mpnn) }).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn eval_targets_and_arch_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small(tmp.path());
    cmd_synth(&cfg, false).unwrap();
    let out = cmd_train(&cfg, &opts(TrainMode::Baseline)).unwrap();
    let ckpt = out.dir.join("model.ckpt");
    for target in ["rater1", "majority-vote", "clean"] {
        let o = EvalOptions {
            target: Some(target.parse().unwrap()),
            ..EvalOptions::default()
        };
        cmd_eval(&cfg, &ckpt, &o).unwrap();
    }
    let (rows, _) = cmd_report(&cfg).unwrap();
    let targets: Vec<_> = rows.iter().map(|r| r.target.as_str()).collect();
    // The eval row against `clean` repeats the training report and is merged.
    assert_eq!(targets, ["clean", "majority-vote", "rater1"]);
    // With one rater the majority vote is that rater.
    let row = |t: &str| rows.iter().find(|r| r.target == t).unwrap().clone();
    assert_eq!(row("majority-vote").dice_disc, row("rater1").dice_disc);

    let mut wide = cfg.clone();
    wide.model.widths = Some(vec![8, 16, 32]);
    for ckpt in [ckpt, out.dir.join("state.ckpt")] {
        let err = cmd_eval(&wide, &ckpt, &EvalOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
    assert!(train_dir(&cfg, "baseline").join("model.ckpt").exists());
}
