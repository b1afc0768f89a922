//! Pipeline stages behind the `mpnn` binary.
//!
//! Every stage reads a [`RunConfig`] and writes below `output_dir` (or, for
//! `synth`, below `data.root`). Stages hold a lock file on the directory they
//! write to for their whole duration.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mpnn_core::config::RunConfig;
use mpnn_core::datasets::{mask_path, synth_samples, ChannelStats, RaterSelector, SynthParams};
use mpnn_core::evaluate::{emit_report, evaluate_model, read_report, MetricsReport, ReportRow};
use mpnn_core::model::{load_params, save_params};
use mpnn_core::mpggd::{
    generate_pseudo_labels, load_partitions, save_partitions, PartitionManifest, PseudoLabelSet,
};
use mpnn_core::trainer::{Ablation, TrainData, TrainMode, TrainState};
use mpnn_core::{Error, Result};

pub const LOCK_FILE: &str = ".lock";

/// Process exit status for a failed stage.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::ThresholdNotReached { .. } => 3,
        Error::NonFiniteLoss { .. } | Error::NonFinite(_) => 4,
        Error::Config(_)
        | Error::InvalidArch(_)
        | Error::TomlDe(_)
        | Error::NoSamples(_)
        | Error::MissingMask { .. }
        | Error::InvalidLabel { .. }
        | Error::ShapeMismatch { .. }
        | Error::ZeroVariance { .. }
        | Error::UnknownId(_)
        | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

/// Exclusive writer lock on a directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id()).map_err(|e| Error::io_at(&path, e))?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another process (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io_at(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub params: SynthParamsRecord,
    pub train: Vec<String>,
    pub test: Vec<String>,
    /// Number of files written (images and masks).
    pub files: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParamsRecord {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub side: usize,
    pub boundary_noise: f64,
}

/// Writes a synthetic dataset to `data.root` in the on-disk dataset layout:
/// `<root>/{train,test}/<id>_image.png`, `<id>_rater1.png` (noisy) and
/// `<id>_clean.png`.
pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<SynthManifest> {
    let root = &cfg.data.root;
    let s = &cfg.synth;
    if root.exists() {
        let nonempty = fs::read_dir(root)
            .map_err(|e| Error::io_at(root, e))?
            .next()
            .is_some();
        if nonempty && !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite",
                root.display()
            )));
        }
    }
    let _lock = RunLock::acquire(root)?;
    for split in [&cfg.data.train_sources[..], &cfg.data.test_sources[..]] {
        if split.len() != 1 {
            return Err(Error::Config(
                "synth writes exactly one train and one test source".into(),
            ));
        }
    }
    let (train_src, test_src) = (&cfg.data.train_sources[0], &cfg.data.test_sources[0]);
    for src in [train_src, test_src] {
        let dir = root.join(src);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
        }
    }
    let samples = synth_samples(&SynthParams {
        seed: s.seed,
        count: s.train_count + s.test_count,
        side: s.side,
        boundary_noise: s.boundary_noise,
    })?;
    let mut manifest = SynthManifest {
        params: SynthParamsRecord {
            seed: s.seed,
            train_count: s.train_count,
            test_count: s.test_count,
            side: s.side,
            boundary_noise: s.boundary_noise,
        },
        train: Vec::new(),
        test: Vec::new(),
        files: 0,
    };
    for (i, sample) in samples.iter().enumerate() {
        let (src, list) = if i < s.train_count {
            (train_src, &mut manifest.train)
        } else {
            (test_src, &mut manifest.test)
        };
        let dir = root.join(src);
        fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
        let image_path = dir.join(format!("{}_image.png", sample.id));
        sample.rgb.save(&image_path)?;
        sample.noisy.save(&mask_path(&dir, &sample.id, "rater1"))?;
        sample.clean.save(&mask_path(&dir, &sample.id, "clean"))?;
        list.push(format!("{src}/{}", sample.id));
        manifest.files += 3;
    }
    write_json(&root.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn pseudo_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("pseudo")
}

pub fn partition_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join("partition")
}

/// Trains the pseudo-label members and writes `<run>/pseudo/`.
pub fn cmd_pseudo(cfg: &RunConfig) -> Result<PseudoLabelSet> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let (train, _, stats) = cfg.load_standardized()?;
    stats.save(&cfg.output_dir.join("stats.json"))?;
    let set = generate_pseudo_labels(&train, &cfg.mpggd, &cfg.model.arch()?, &cfg.member_recipe())?;
    let dir = pseudo_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
    }
    set.save(&dir)?;
    Ok(set)
}

/// Derives the clean/noisy split of every training image from the pseudo store.
pub fn cmd_partition(cfg: &RunConfig) -> Result<PartitionManifest> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let src = pseudo_dir(cfg);
    if !src.join("manifest.json").exists() {
        return Err(Error::Config(format!(
            "no pseudo-label store at {}; run `pseudo` first",
            src.display()
        )));
    }
    let set = PseudoLabelSet::load(&src)?;
    let ids: Vec<&str> = set.ids().collect();
    let parts = ids
        .iter()
        .map(|id| set.partition(id))
        .collect::<Result<Vec<_>>>()?;
    let dir = partition_dir(cfg);
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
    }
    save_partitions(&dir, &set, &ids, &parts)
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub mode: TrainMode,
    pub ablation: Ablation,
    /// Run name below `<run>/train/`; derived from mode and ablation if absent.
    pub name: Option<String>,
    pub resume: bool,
}

impl TrainOptions {
    pub fn run_name(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match (self.mode, self.ablation) {
            (TrainMode::Baseline, _) => "baseline".into(),
            (TrainMode::Mpnn, Ablation::None) => "mpnn".into(),
            (TrainMode::Mpnn, Ablation::CleanOnly) => "mpnn-clean-only".into(),
            (TrainMode::Mpnn, Ablation::NoisyOnly) => "mpnn-noisy-only".into(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub report: MetricsReport,
    pub steps: u64,
}

pub fn train_dir(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join("train").join(name)
}

fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let ckpts = dir.join("checkpoints");
    if !ckpts.exists() {
        return Ok(None);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(&ckpts)
        .map_err(|e| Error::io_at(&ckpts, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    found.sort();
    Ok(found.pop())
}

/// Keeps the log lines of steps before `step`.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut kept = String::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io_at(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&line)?;
        if v["step"].as_u64().is_some_and(|s| s < step) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept).map_err(|e| Error::io_at(path, e))
}

/// Trains one configuration into `<run>/train/<name>/` and evaluates it.
///
/// The directory receives `config.toml` (resolved configuration) with its
/// SHA-256 in `config.sha256`, `metrics.jsonl` (one line per step),
/// `checkpoints/step_*.ckpt`, `state.ckpt`, `model.ckpt` (the evaluated
/// network) and `report.csv`.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let name = opts.run_name();
    let dir = train_dir(cfg, &name);
    let snapshot = cfg.to_toml()?;
    let hash = sha256_hex(snapshot.as_bytes());
    let (train, test, stats) = cfg.load_standardized()?;
    let arch = cfg.model.arch()?;

    let partitions = match opts.mode {
        TrainMode::Baseline => None,
        TrainMode::Mpnn => {
            let pdir = partition_dir(cfg);
            if !pdir.join("manifest.json").exists() {
                return Err(Error::Config(format!(
                    "no partition store at {}; run `partition` first",
                    pdir.display()
                )));
            }
            Some(load_partitions(&pdir, &train)?)
        }
    };

    let log_path = dir.join("metrics.jsonl");
    let resume_from = if opts.resume { latest_checkpoint(&dir)? } else { None };
    let mut state = match &resume_from {
        Some(ckpt) => {
            let recorded = fs::read_to_string(dir.join("config.sha256")).unwrap_or_default();
            if recorded.trim() != hash {
                return Err(Error::Config(format!(
                    "configuration differs from the one {} was started with",
                    dir.display()
                )));
            }
            let state = TrainState::load(ckpt)?;
            if state.mode != opts.mode || state.ablation != opts.ablation {
                return Err(Error::Config(format!(
                    "{} holds a different mode/ablation",
                    ckpt.display()
                )));
            }
            truncate_log(&log_path, state.step)?;
            log::info!("resuming {name} at step {}", state.step);
            state
        }
        None => {
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
            }
            let t_max = cfg.recipe.epochs as u64 * cfg.recipe.steps_per_epoch(train.len());
            TrainState::new(
                &arch,
                cfg.seed,
                opts.mode,
                opts.ablation,
                cfg.recipe.clone(),
                cfg.noise_aware.clone(),
                t_max,
            )?
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
    fs::write(dir.join("config.toml"), &snapshot).map_err(|e| Error::io_at(&dir, e))?;
    fs::write(dir.join("config.sha256"), format!("{hash}\n")).map_err(|e| Error::io_at(&dir, e))?;
    stats.save(&dir.join("stats.json"))?;

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io_at(&log_path, e))?;
    let every = cfg.checkpoint_every;
    let data = TrainData::new(&train, partitions.as_deref())?;
    state.run(
        &data,
        |st, m| {
            let mut line = serde_json::to_string(m)?;
            line.push('\n');
            log.write_all(line.as_bytes()).map_err(|e| Error::io_at(&log_path, e))?;
            if every > 0 && st.step % every == 0 {
                st.save(&checkpoint_path(&dir, st.step))?;
            }
            Ok(())
        },
        |st, epoch| {
            log::info!("{name}: epoch {epoch} done (step {})", st.step);
            Ok(ControlFlow::Continue(()))
        },
    )?;
    log.flush().map_err(|e| Error::io_at(&log_path, e))?;
    state.save(&dir.join("state.ckpt"))?;
    let model = state.eval_params(cfg.eval.use_student);
    save_params(model, state.step, &dir.join("model.ckpt"))?;
    let report = evaluate_model(model, &test, &name, &cfg.eval.target.to_string())?;
    emit_report(&[report.row()], &dir.join("report.csv"))?;
    Ok(TrainOutcome {
        dir,
        report,
        steps: state.step,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    /// Overrides `eval.target`.
    pub target: Option<RaterSelector>,
    /// Method column of the report; defaults to the checkpoint's parent directory name.
    pub method: Option<String>,
    /// Defaults to `<run>/eval/<method>_<target>.csv`.
    pub out: Option<PathBuf>,
}

/// Evaluates a parameter archive (`model.ckpt`) or a training state
/// (`state.ckpt`, teacher unless `eval.use_student`) on the test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, opts: &EvalOptions) -> Result<(MetricsReport, PathBuf)> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let arch = cfg.model.arch()?;
    let params = match load_params(checkpoint, Some(&arch)) {
        Ok((p, _)) => p,
        Err(Error::Checkpoint(msg)) if msg.contains("missing tensor") => {
            let state = TrainState::load(checkpoint)?;
            if state.student.arch != arch {
                return Err(Error::Checkpoint(format!(
                    "architecture mismatch: checkpoint has widths {:?}, configuration has {:?}",
                    state.student.arch.widths, arch.widths
                )));
            }
            state.eval_params(cfg.eval.use_student).clone()
        }
        Err(e) => return Err(e),
    };
    let target = opts.target.unwrap_or(cfg.eval.target);
    let train = cfg.load_train()?;
    let stats = ChannelStats::of_dataset(&train)?;
    let mut test = cfg.load_test(target)?;
    test.standardize(&stats);
    let method = opts.method.clone().unwrap_or_else(|| {
        checkpoint
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let report = evaluate_model(&params, &test, &method, &target.to_string())?;
    let out = opts.out.clone().unwrap_or_else(|| {
        cfg.output_dir
            .join("eval")
            .join(format!("{method}_{target}.csv"))
    });
    emit_report(&[report.row()], &out)?;
    Ok((report, out))
}

/// Collects every `train/*/report.csv` and `eval/*.csv` of the run into
/// `<run>/report.csv` (and `report.md`), sorted by method and target.
pub fn cmd_report(cfg: &RunConfig) -> Result<(Vec<ReportRow>, PathBuf)> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let mut files = Vec::new();
    let train = cfg.output_dir.join("train");
    if train.exists() {
        for e in fs::read_dir(&train).map_err(|e| Error::io_at(&train, e))? {
            let p = e.map_err(|e| Error::io_at(&train, e))?.path().join("report.csv");
            if p.exists() {
                files.push(p);
            }
        }
    }
    let eval = cfg.output_dir.join("eval");
    if eval.exists() {
        for e in fs::read_dir(&eval).map_err(|e| Error::io_at(&eval, e))? {
            let p = e.map_err(|e| Error::io_at(&eval, e))?.path();
            if p.extension().is_some_and(|x| x == "csv") {
                files.push(p);
            }
        }
    }
    if files.is_empty() {
        return Err(Error::Config(format!(
            "no reports under {}; run `train` or `eval` first",
            cfg.output_dir.display()
        )));
    }
    let mut rows = Vec::new();
    for f in &files {
        rows.extend(read_report(f)?);
    }
    rows.sort_by(|a, b| (&a.method, &a.target).cmp(&(&b.method, &b.target)));
    rows.dedup();
    let out = cfg.output_dir.join("report.csv");
    emit_report(&rows, &out)?;
    Ok((rows, out))
}
