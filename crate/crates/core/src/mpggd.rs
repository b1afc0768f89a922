//! Pseudo-label ensemble and the clean/noisy pixel split derived from it.
//!
//! `K` segmentation networks that differ only in seed are each trained on the
//! noisy labels until their mean DSC over the training set reaches `φ`. Their
//! predictions on the training images are the pseudo-labels; a pixel is clean
//! when all `K` pseudo-labels agree on it.

use std::collections::BTreeMap;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, LabelMask};
use crate::error::{Error, Result};
use crate::evaluate::{dice, CUP, DISC};
use crate::model::{predict_mask, ArchDescriptor, ParamSet};
use crate::noise_aware::NoiseAwareConfig;
use crate::trainer::{Ablation, Recipe, TrainData, TrainMode, TrainState};

/// Per-pixel clean (all pseudo-labels agree) / noisy flag.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelPartition {
    height: usize,
    width: usize,
    clean: Vec<bool>,
    pub s_cl: usize,
    pub s_no: usize,
}

impl PixelPartition {
    pub fn from_clean(height: usize, width: usize, clean: Vec<bool>) -> Self {
        assert_eq!(clean.len(), height * width, "partition buffer size");
        let s_cl = clean.iter().filter(|&&c| c).count();
        Self {
            height,
            width,
            s_no: clean.len() - s_cl,
            clean,
            s_cl,
        }
    }

    pub fn all_clean(height: usize, width: usize) -> Self {
        Self::from_clean(height, width, vec![true; height * width])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn clean(&self) -> &[bool] {
        &self.clean
    }

    pub fn is_clean(&self, y: usize, x: usize) -> bool {
        self.clean[y * self.width + x]
    }

    /// 1 for clean, 0 for noisy.
    pub fn to_mask(&self) -> LabelMask {
        LabelMask::new(
            self.height,
            self.width,
            self.clean.iter().map(|&c| c as u8).collect(),
        )
        .expect("0/1 values are valid labels")
    }

    pub fn from_mask(mask: &LabelMask, id: &str) -> Result<Self> {
        if let Some(&v) = mask.values().iter().find(|&&v| v > 1) {
            return Err(Error::InvalidLabel {
                id: id.to_string(),
                value: v,
            });
        }
        Ok(Self::from_clean(
            mask.height(),
            mask.width(),
            mask.values().iter().map(|&v| v == 1).collect(),
        ))
    }
}

/// Clean where every mask carries the same label.
pub fn partition_masks(masks: &[LabelMask]) -> Result<PixelPartition> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Config("partition of zero pseudo-labels".into()))?;
    for m in &masks[1..] {
        first.check_same_shape(m)?;
    }
    let clean = (0..first.len())
        .map(|i| {
            let v = first.values()[i];
            masks[1..].iter().all(|m| m.values()[i] == v)
        })
        .collect();
    Ok(PixelPartition::from_clean(first.height(), first.width(), clean))
}

/// Mean of disc and cup Dice, as a fraction.
pub fn dsc_m(pred: &LabelMask, gt: &LabelMask) -> f64 {
    (dice(pred, gt, DISC) + dice(pred, gt, CUP)) / 2.0
}

pub fn mean_dsc_m(params: &ParamSet<f32>, dataset: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    for s in dataset.iter() {
        total += dsc_m(&predict_mask(params, &s.image)?, &s.label);
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpggdConfig {
    /// Ensemble size.
    pub k: usize,
    /// Training-set DSC_m a member must reach before it may label.
    pub phi: f64,
    pub max_epochs: usize,
    /// Member `i` uses seed `base_seed + i`.
    pub base_seed: u64,
}

impl Default for MpggdConfig {
    fn default() -> Self {
        Self {
            k: 5,
            phi: 0.93,
            max_epochs: 200,
            base_seed: 0,
        }
    }
}

impl MpggdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("mpggd: K must be at least 2, got {}", self.k)));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::Config(format!("mpggd: phi {} outside [0, 1]", self.phi)));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("mpggd: max_epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.k as u64).map(|i| self.base_seed + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberInfo {
    pub seed: u64,
    /// Epoch at which the threshold was first met.
    pub epochs: usize,
    pub dsc_m: f64,
}

/// Trains one member on `dataset` (noisy labels, every pixel) until the
/// epoch-end training-set DSC_m reaches `phi`.
pub fn train_to_threshold(
    dataset: &Dataset,
    arch: &ArchDescriptor,
    recipe: &Recipe,
    seed: u64,
    phi: f64,
    max_epochs: usize,
) -> Result<(ParamSet<f32>, MemberInfo)> {
    let t_max = max_epochs as u64 * recipe.steps_per_epoch(dataset.len());
    let mut state = TrainState::new(
        arch,
        seed,
        TrainMode::Baseline,
        Ablation::None,
        recipe.clone(),
        NoiseAwareConfig::default(),
        t_max,
    )?;
    let mut best = f64::NEG_INFINITY;
    let mut reached = None;
    state.run(&TrainData::new(dataset, None)?, |_, _| Ok(()), |st, epoch| {
        let d = mean_dsc_m(&st.student, dataset)?;
        log::debug!("member seed {seed} epoch {epoch}: DSC_m {d:.4}");
        best = best.max(d);
        if d >= phi {
            reached = Some(MemberInfo {
                seed,
                epochs: epoch as usize,
                dsc_m: d,
            });
            return Ok(ControlFlow::Break(()));
        }
        Ok(ControlFlow::Continue(()))
    })?;
    match reached {
        Some(info) => Ok((state.student, info)),
        None => Err(Error::ThresholdNotReached {
            phi,
            best,
            epochs: max_epochs,
            seed,
        }),
    }
}

/// `K` pseudo-label masks per training image, with the members that made them.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub k: usize,
    pub phi: f64,
    pub members: Vec<MemberInfo>,
    labels: BTreeMap<String, Vec<LabelMask>>,
}

#[derive(Serialize, Deserialize)]
struct PseudoManifest {
    k: usize,
    phi: f64,
    members: Vec<MemberInfo>,
    ids: Vec<String>,
}

impl PseudoLabelSet {
    pub fn new(k: usize, phi: f64, members: Vec<MemberInfo>) -> Self {
        Self {
            k,
            phi,
            members,
            labels: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: &str, masks: Vec<LabelMask>) -> Result<()> {
        if masks.len() != self.k {
            return Err(Error::Config(format!(
                "`{id}`: {} pseudo-labels, expected {}",
                masks.len(),
                self.k
            )));
        }
        for m in &masks[1..] {
            masks[0].check_same_shape(m)?;
        }
        self.labels.insert(id.to_string(), masks);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&[LabelMask]> {
        self.labels
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownId(id.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.labels.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.seed).collect()
    }

    pub fn partition(&self, id: &str) -> Result<PixelPartition> {
        partition_masks(self.get(id)?)
    }

    /// Partitions in the order of `dataset`.
    pub fn partitions_for(&self, dataset: &Dataset) -> Result<Vec<PixelPartition>> {
        dataset
            .iter()
            .map(|s| {
                let p = self.partition(&s.id)?;
                if p.shape() != s.label.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: vec![s.label.height(), s.label.width()],
                        actual: vec![p.shape().0, p.shape().1],
                    });
                }
                Ok(p)
            })
            .collect()
    }

    /// Writes `<dir>/<id>_k<k>.png` for every mask plus `<dir>/manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for (id, masks) in &self.labels {
            for (k, m) in masks.iter().enumerate() {
                m.save(&pseudo_path(dir, id, k))?;
            }
        }
        let manifest = PseudoManifest {
            k: self.k,
            phi: self.phi,
            members: self.members.clone(),
            ids: self.labels.keys().cloned().collect(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: PseudoManifest = read_json(&dir.join("manifest.json"))?;
        let mut set = Self::new(manifest.k, manifest.phi, manifest.members);
        for id in &manifest.ids {
            let masks = (0..manifest.k)
                .map(|k| {
                    let path = pseudo_path(dir, id, k);
                    if !path.exists() {
                        return Err(Error::MissingMask {
                            id: id.clone(),
                            path,
                        });
                    }
                    LabelMask::load(&path, id)
                })
                .collect::<Result<Vec<_>>>()?;
            set.insert(id, masks)?;
        }
        Ok(set)
    }
}

pub fn pseudo_path(dir: &Path, id: &str, k: usize) -> PathBuf {
    dir.join(format!("{id}_k{k}.png"))
}

pub fn partition_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Trains the `K` members and labels every training image with each of them.
/// Any member failing to reach `phi` aborts the whole set.
pub fn generate_pseudo_labels(
    dataset: &Dataset,
    cfg: &MpggdConfig,
    arch: &ArchDescriptor,
    recipe: &Recipe,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    let mut members = Vec::with_capacity(cfg.k);
    let mut predictions: Vec<Vec<LabelMask>> = vec![Vec::with_capacity(cfg.k); dataset.len()];
    for seed in cfg.seeds() {
        let (params, info) = train_to_threshold(dataset, arch, recipe, seed, cfg.phi, cfg.max_epochs)?;
        log::info!(
            "member seed {seed}: DSC_m {:.4} after {} epochs",
            info.dsc_m,
            info.epochs
        );
        for (slot, s) in predictions.iter_mut().zip(dataset.iter()) {
            slot.push(predict_mask(&params, &s.image)?);
        }
        members.push(info);
    }
    let mut set = PseudoLabelSet::new(cfg.k, cfg.phi, members);
    for (s, masks) in dataset.iter().zip(predictions) {
        set.insert(&s.id, masks)?;
    }
    Ok(set)
}

/// Summary written next to the partition masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub k: usize,
    pub phi: f64,
    pub seeds: Vec<u64>,
    pub s_cl_total: u64,
    pub s_no_total: u64,
    pub members: Vec<MemberInfo>,
    pub ids: Vec<String>,
}

impl PartitionManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("manifest.json"))
    }
}

/// Writes `<dir>/<id>.png` (1 clean, 0 noisy) and `<dir>/manifest.json`.
pub fn save_partitions(
    dir: &Path,
    pseudo: &PseudoLabelSet,
    ids: &[&str],
    parts: &[PixelPartition],
) -> Result<PartitionManifest> {
    assert_eq!(ids.len(), parts.len());
    for (id, p) in ids.iter().zip(parts) {
        p.to_mask().save(&partition_path(dir, id))?;
    }
    let manifest = PartitionManifest {
        k: pseudo.k,
        phi: pseudo.phi,
        seeds: pseudo.seeds(),
        s_cl_total: parts.iter().map(|p| p.s_cl as u64).sum(),
        s_no_total: parts.iter().map(|p| p.s_no as u64).sum(),
        members: pseudo.members.clone(),
        ids: ids.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Partitions for the samples of `dataset`, read from a partition store.
pub fn load_partitions(dir: &Path, dataset: &Dataset) -> Result<Vec<PixelPartition>> {
    dataset
        .iter()
        .map(|s| {
            let path = partition_path(dir, &s.id);
            if !path.exists() {
                return Err(Error::MissingMask {
                    id: s.id.clone(),
                    path,
                });
            }
            let p = PixelPartition::from_mask(&LabelMask::load(&path, &s.id)?, &s.id)?;
            if p.shape() != s.label.shape() {
                return Err(Error::ShapeMismatch {
                    expected: vec![s.label.height(), s.label.width()],
                    actual: vec![p.shape().0, p.shape().1],
                });
            }
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, side: usize) -> LabelMask {
        LabelMask::new(side, side, (0..side * side).map(|_| rng.random_range(0..3)).collect()).unwrap()
    }

    #[test]
    fn identical_masks_are_all_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, 8);
        let p = partition_masks(&[m.clone(), m.clone(), m]).unwrap();
        assert_eq!((p.s_cl, p.s_no), (64, 0));
    }

    #[test]
    fn single_disagreement_marks_one_pixel() {
        let a = LabelMask::filled(4, 4, 1);
        let mut b = a.clone();
        b.set(2, 3, 2);
        let p = partition_masks(&[a.clone(), a, b]).unwrap();
        assert_eq!((p.s_cl, p.s_no), (15, 1));
        assert!(!p.is_clean(2, 3));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = LabelMask::filled(4, 4, 0);
        let b = LabelMask::filled(4, 5, 0);
        assert!(matches!(partition_masks(&[a, b]), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn adding_a_mask_never_grows_the_clean_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut masks: Vec<_> = (0..2).map(|_| random_mask(&mut rng, 6)).collect();
            let before = partition_masks(&masks).unwrap();
            masks.push(random_mask(&mut rng, 6));
            let after = partition_masks(&masks).unwrap();
            for (a, b) in after.clean().iter().zip(before.clean()) {
                assert!(!a || *b);
            }
        }
    }

    proptest! {
        #[test]
        fn partition_is_order_free(seed in any::<u64>(), k in 2usize..6, rot in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut masks: Vec<_> = (0..k).map(|_| random_mask(&mut rng, 5)).collect();
            let a = partition_masks(&masks).unwrap();
            masks.rotate_left(rot % k);
            masks.swap(0, k - 1);
            prop_assert_eq!(a, partition_masks(&masks).unwrap());
        }
    }

    #[test]
    fn partition_mask_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let p = PixelPartition::from_clean(3, 2, vec![true, false, false, true, true, true]);
        let path = tmp.path().join("x.png");
        p.to_mask().save(&path).unwrap();
        let back = PixelPartition::from_mask(&LabelMask::load(&path, "x").unwrap(), "x").unwrap();
        assert_eq!(p, back);
        assert!(PixelPartition::from_mask(&LabelMask::filled(2, 2, 2), "y").is_err());
    }

    #[test]
    fn pseudo_store_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let members = vec![
            MemberInfo { seed: 4, epochs: 3, dsc_m: 0.91 },
            MemberInfo { seed: 5, epochs: 2, dsc_m: 0.95 },
        ];
        let mut set = PseudoLabelSet::new(2, 0.9, members);
        set.insert("a/one", vec![random_mask(&mut rng, 4), random_mask(&mut rng, 4)]).unwrap();
        set.insert("b", vec![random_mask(&mut rng, 4), random_mask(&mut rng, 4)]).unwrap();
        assert!(set.insert("c", vec![random_mask(&mut rng, 4)]).is_err());
        set.save(tmp.path()).unwrap();
        assert!(tmp.path().join("a/one_k1.png").exists());
        let back = PseudoLabelSet::load(tmp.path()).unwrap();
        assert_eq!(back, set);
        assert!(matches!(set.get("zzz"), Err(Error::UnknownId(_))));
    }

    #[test]
    fn config_rejects_single_member() {
        let cfg = MpggdConfig { k: 1, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert_eq!(MpggdConfig { k: 3, base_seed: 7, ..Default::default() }.seeds(), vec![7, 8, 9]);
    }

    #[test]
    fn zero_threshold_stops_after_first_epoch() {
        let (ds, _) = crate::datasets::synth_generate(&crate::datasets::SynthParams {
            seed: 1,
            count: 4,
            side: 32,
            boundary_noise: 0.3,
        })
        .unwrap();
        let recipe = Recipe { batch: 2, ..Recipe::default() };
        let (_, info) = train_to_threshold(&ds, &ArchDescriptor::tiny(), &recipe, 0, 0.0, 5).unwrap();
        assert_eq!(info.epochs, 1);
        match train_to_threshold(&ds, &ArchDescriptor::tiny(), &recipe, 0, 1.0, 1) {
            Err(Error::ThresholdNotReached { epochs, best, .. }) => {
                assert_eq!(epochs, 1);
                assert!((0.0..1.0).contains(&best));
            }
            other => panic!("expected threshold error, got {other:?}"),
        }
    }
}
