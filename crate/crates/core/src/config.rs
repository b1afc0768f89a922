//! Run configuration: layered TOML files, dotted-key overrides, environment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{load_riga_split, ChannelStats, Dataset, RaterSelector};
use crate::error::{Error, Result};
use crate::model::ArchDescriptor;
use crate::mpggd::MpggdConfig;
use crate::noise_aware::NoiseAwareConfig;
use crate::trainer::Recipe;

/// Overrides `output_dir`.
pub const ENV_OUTPUT_DIR: &str = "MPNN_OUTPUT_DIR";
/// Overrides `seed`.
pub const ENV_SEED: &str = "MPNN_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed of the student/baseline network and of every derived stream.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub synth: SynthConfig,
    pub eval: EvalConfig,
    pub mpggd: MpggdConfig,
    pub noise_aware: NoiseAwareConfig,
    pub recipe: Recipe,
    /// Recipe of the pseudo-label members; defaults to `recipe`.
    pub mpggd_recipe: Option<Recipe>,
    /// Steps between checkpoints (0 disables periodic checkpoints).
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            synth: SynthConfig::default(),
            eval: EvalConfig::default(),
            mpggd: MpggdConfig::default(),
            noise_aware: NoiseAwareConfig::default(),
            recipe: Recipe::default(),
            mpggd_recipe: None,
            checkpoint_every: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub root: PathBuf,
    pub train_sources: Vec<String>,
    pub test_sources: Vec<String>,
    /// Annotation used for training.
    pub rater: RaterSelector,
    pub side: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            train_sources: vec!["train".into()],
            test_sources: vec!["test".into()],
            rater: RaterSelector::Rater(1),
            side: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Annotation of the test split evaluated against.
    pub target: RaterSelector,
    /// Evaluate the student instead of the teacher of an MPNN run.
    pub use_student: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            target: RaterSelector::MajorityVote,
            use_student: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `tiny` or `linknet`.
    pub preset: String,
    /// Replaces the preset widths when set.
    pub widths: Option<Vec<usize>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: "linknet".into(),
            widths: None,
        }
    }
}

impl ModelConfig {
    pub fn arch(&self) -> Result<ArchDescriptor> {
        let mut arch = ArchDescriptor::preset(&self.preset)?;
        if let Some(w) = &self.widths {
            arch.widths = w.clone();
        }
        arch.validate()?;
        Ok(arch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub train_count: usize,
    pub test_count: usize,
    pub side: usize,
    pub boundary_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_count: 200,
            test_count: 50,
            side: 64,
            boundary_noise: 0.3,
        }
    }
}

impl RunConfig {
    /// Reads `path` (with its `include`s), applies `key=value` overrides and
    /// then the environment, and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let mut value = read_layered(path, &mut Vec::new())?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg = Self::from_value(value)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg = Self::from_value(toml::from_str(text)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn from_value(value: toml::Table) -> Result<Self> {
        Self::deserialize(toml::Value::Table(value)).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(dir) = std::env::var(ENV_OUTPUT_DIR) {
            self.output_dir = PathBuf::from(dir);
        }
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED}={seed} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.arch()?;
        self.mpggd.validate()?;
        self.noise_aware.validate()?;
        self.recipe.validate()?;
        self.member_recipe().validate()?;
        let div = self.model.arch()?.divisor();
        if self.data.side == 0 || self.data.side % div != 0 {
            return Err(Error::Config(format!(
                "data.side {} must be a positive multiple of {div}",
                self.data.side
            )));
        }
        if self.synth.side % div != 0 {
            return Err(Error::Config(format!(
                "synth.side {} must be a multiple of {div}",
                self.synth.side
            )));
        }
        Ok(())
    }

    pub fn member_recipe(&self) -> Recipe {
        self.mpggd_recipe.clone().unwrap_or_else(|| self.recipe.clone())
    }

    /// Canonical TOML of the fully resolved configuration.
    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Training split, raw intensities in `[0, 1]`.
    pub fn load_train(&self) -> Result<Dataset> {
        let d = &self.data;
        load_riga_split(&d.root, &d.train_sources, d.rater, d.side)
    }

    /// Test split labelled with `target`, raw intensities in `[0, 1]`.
    pub fn load_test(&self, target: RaterSelector) -> Result<Dataset> {
        let d = &self.data;
        load_riga_split(&d.root, &d.test_sources, target, d.side)
    }

    /// Both splits standardized with training-split channel statistics.
    pub fn load_standardized(&self) -> Result<(Dataset, Dataset, ChannelStats)> {
        let mut train = self.load_train()?;
        let stats = ChannelStats::of_dataset(&train)?;
        train.standardize(&stats);
        let mut test = self.load_test(self.eval.target)?;
        test.standardize(&stats);
        Ok((train, test, stats))
    }
}

/// Parses `path`, merging the files named in its top-level `include` array
/// underneath it (later includes win over earlier ones; the file wins over all).
fn read_layered(path: &Path, stack: &mut Vec<PathBuf>) -> Result<toml::Table> {
    let canonical = path.canonicalize().map_err(|e| Error::io_at(path, e))?;
    if stack.contains(&canonical) {
        return Err(Error::Config(format!("include cycle through {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    let mut table: toml::Table = toml::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(toml::Value::String(s)) => vec![s],
        Some(toml::Value::Array(a)) => a
            .into_iter()
            .map(|v| match v {
                toml::Value::String(s) => Ok(s),
                other => Err(Error::Config(format!("include entry {other} is not a path"))),
            })
            .collect::<Result<_>>()?,
        Some(other) => return Err(Error::Config(format!("include {other} is not a path list"))),
    };
    stack.push(canonical);
    let base_dir = path.parent().unwrap_or(Path::new("."));
    let mut merged = toml::Table::new();
    for inc in includes {
        let layer = read_layered(&base_dir.join(inc), stack)?;
        merge(&mut merged, layer);
    }
    stack.pop();
    merge(&mut merged, table);
    Ok(merged)
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value`, where `value` is parsed as a TOML value and falls back to a
/// plain string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.recipe.lr0, 5e-4);
        assert_eq!(cfg.recipe.batch, 8);
        assert_eq!(cfg.mpggd.k, 5);
        assert_eq!(cfg.mpggd.phi, 0.93);
        assert_eq!(cfg.noise_aware.ema_decay, 0.99);
        assert_eq!(cfg.noise_aware.w_max, 0.1);
    }

    #[test]
    fn snapshot_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 17;
        cfg.mpggd_recipe = Some(Recipe {
            lr0: 1e-3,
            ..Recipe::default()
        });
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn includes_and_overrides_layer() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(
            tmp.path().join("base.toml"),
            "seed = 3\n[recipe]\nlr0 = 0.01\nbatch = 4\n",
        )
        .unwrap();
        fs::write(
            tmp.path().join("run.toml"),
            "include = [\"base.toml\"]\n[recipe]\nbatch = 2\n[model]\npreset = \"tiny\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(
            &tmp.path().join("run.toml"),
            &["mpggd.k=3".into(), "data.root=/x/y".into()],
        )
        .unwrap();
        assert_eq!(cfg.recipe.lr0, 0.01);
        assert_eq!(cfg.recipe.batch, 2);
        assert_eq!(cfg.mpggd.k, 3);
        assert_eq!(cfg.data.root, PathBuf::from("/x/y"));
        assert_eq!(cfg.model.preset, "tiny");
    }

    #[test]
    fn include_cycle_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(tmp.path().join("a.toml"), "include = \"b.toml\"\n").unwrap();
        fs::write(tmp.path().join("b.toml"), "include = \"a.toml\"\n").unwrap();
        assert!(matches!(
            RunConfig::load(&tmp.path().join("a.toml"), &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml_str("[mpggd]\nk = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[noise_aware]\nema_decay = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("[data]\nside = 100\n").is_err());
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
    }
}
