//! Supervised and student/teacher training loops.

use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{Dataset, ImageSample};
use crate::error::{Error, Result};
use crate::model::{backward, forward, forward_train, ArchDescriptor, Archive, ParamSet, ProbMap};
use crate::mpggd::PixelPartition;
use crate::noise_aware::{
    clean_loss_with_grad, entropy_of, lambda_schedule, noisy_loss_with_grad, perturb, teacher_mean,
    threshold_schedule, NoiseAwareConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Recipe {
    pub lr0: f64,
    /// Steps between learning-rate decays.
    pub decay_every: u64,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Recipe {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            decay_every: 2000,
            decay_factor: 0.1,
            epochs: 100,
            batch: 8,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("recipe: {m}")));
        if !(self.lr0 > 0.0) {
            return bad("lr0 must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return bad("decay_factor must lie in (0, 1)");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive");
        }
        if self.batch == 0 {
            return bad("batch must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch) as u64
    }
}

/// `lr0 · decay_factor^⌊step / decay_every⌋`.
pub fn lr_at(step: u64, recipe: &Recipe) -> f64 {
    recipe.lr0 * recipe.decay_factor.powi((step / recipe.decay_every) as i32)
}

/// `teacher ← α·teacher + (1 − α)·student`, element-wise.
pub fn ema_update(teacher: &mut ParamSet<f32>, student: &ParamSet<f32>, alpha: f64) -> Result<()> {
    teacher.check_compatible(student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA decay {alpha} outside [0, 1]")));
    }
    // Combined in f64 so each update rounds once.
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = (alpha * *tv as f64 + (1.0 - alpha) * sv as f64) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: ParamSet<f32>,
    pub v: ParamSet<f32>,
    pub count: u64,
}

impl Adam {
    pub fn new(params: &ParamSet<f32>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            count: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &ParamSet<f32>, lr: f64, recipe: &Recipe) {
        self.count += 1;
        let (b1, b2) = (recipe.beta1, recipe.beta2);
        let bc1 = 1.0 - b1.powi(self.count as i32);
        let bc2 = 1.0 - b2.powi(self.count as i32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let (b1, b2, eps) = (b1 as f32, b2 as f32, recipe.eps as f32);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            for j in 0..p.data.len() {
                let gj = g.data[j];
                m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
                v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
                p.data[j] -= step * m.data[j] / ((v.data[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// splitmix64 finalizer; derives independent stream seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample order of one epoch, fixed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5eed, epoch));
    order.shuffle(&mut rng);
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Cross-entropy on every pixel against the given labels; no teacher.
    Baseline,
    /// Clean-pixel cross-entropy plus gated consistency against the teacher.
    Mpnn,
}

/// Which MPNN terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Both terms.
    #[default]
    None,
    /// Clean-pixel cross-entropy only (λ ≡ 0).
    CleanOnly,
    /// No clean/noisy split for supervision (cross-entropy on every pixel),
    /// consistency still on the noisy set.
    NoisyOnly,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "clean-only" => Ok(Ablation::CleanOnly),
            "noisy-only" => Ok(Ablation::NoisyOnly),
            _ => Err(Error::Config(format!("unknown ablation `{s}`"))),
        }
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(TrainMode::Baseline),
            "mpnn" => Ok(TrainMode::Mpnn),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

/// Everything needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ParamSet<f32>,
    pub teacher: ParamSet<f32>,
    pub adam: Adam,
    pub step: u64,
    pub t_max: u64,
    pub seed: u64,
    pub mode: TrainMode,
    pub ablation: Ablation,
    pub recipe: Recipe,
    pub cfg: NoiseAwareConfig,
    pub counters: Counters,
}

/// Occurrences of degenerate loss terms, set to 0 instead of failing.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub empty_clean: u64,
    pub empty_gate: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub l_cl: f64,
    pub l_no: f64,
    pub lambda: f64,
    pub h: f64,
    /// Noisy pixels over the batch.
    pub noisy: usize,
    /// Noisy pixels that passed the uncertainty gate.
    pub gated: usize,
}

/// One training example: image, label, and its clean/noisy partition.
#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    /// Position of the sample in its dataset; seeds the teacher perturbations.
    pub index: usize,
    pub sample: &'a ImageSample,
    pub partition: Option<&'a PixelPartition>,
}

impl TrainState {
    pub fn new(
        arch: &ArchDescriptor,
        seed: u64,
        mode: TrainMode,
        ablation: Ablation,
        recipe: Recipe,
        cfg: NoiseAwareConfig,
        t_max: u64,
    ) -> Result<Self> {
        recipe.validate()?;
        cfg.validate()?;
        let student = ParamSet::init(arch, seed)?;
        Ok(Self {
            teacher: student.clone(),
            adam: Adam::new(&student),
            student,
            step: 0,
            t_max,
            seed,
            mode,
            ablation,
            recipe,
            cfg,
            counters: Counters::default(),
        })
    }

    fn teacher_probs(&self, item: &BatchItem<'_>) -> Result<ProbMap<f32>> {
        let m = self.cfg.perturbations;
        let inputs = perturb(
            &item.sample.image,
            m,
            self.cfg.sigma,
            mix_seed(self.seed, self.step, item.index as u64),
        );
        let stack = inputs
            .iter()
            .map(|x| forward(&self.teacher, x))
            .collect::<Result<Vec<_>>>()?;
        Ok(teacher_mean(&stack))
    }

    /// One optimizer step on `batch`: loss, backprop into the student, Adam,
    /// then the EMA teacher update (MPNN mode). Increments `step`.
    pub fn train_step(&mut self, batch: &[BatchItem<'_>]) -> Result<StepMetrics> {
        assert!(!batch.is_empty(), "empty batch");
        let t = self.step;
        let lambda = match (self.mode, self.ablation) {
            (TrainMode::Baseline, _) | (_, Ablation::CleanOnly) => 0.0,
            _ => lambda_schedule(t, self.t_max, &self.cfg),
        };
        let h = threshold_schedule(t, self.t_max, &self.cfg);
        let beta = match self.mode {
            TrainMode::Baseline => 1.0,
            TrainMode::Mpnn => self.cfg.beta,
        };
        let inv_b = 1.0 / batch.len() as f64;
        let mut grads = self.student.zeros_like();
        let mut metrics = StepMetrics {
            step: t,
            lr: lr_at(t, &self.recipe),
            lambda,
            h,
            ..Default::default()
        };

        for item in batch {
            let s = item.sample;
            let cache = forward_train(&self.student, &s.image)?;
            let (h_px, w_px) = s.label.shape();
            let all_clean;
            let supervise = match (self.mode, self.ablation, item.partition) {
                (TrainMode::Mpnn, Ablation::None | Ablation::CleanOnly, Some(p)) => p,
                (TrainMode::Mpnn, Ablation::None | Ablation::CleanOnly, None) => {
                    return Err(Error::Config(format!("no partition for `{}`", s.id)));
                }
                _ => {
                    all_clean = PixelPartition::all_clean(h_px, w_px);
                    &all_clean
                }
            };
            let clean = clean_loss_with_grad(&cache.probs, &s.label, supervise);
            if clean.count == 0 {
                self.counters.empty_clean += 1;
            }
            let mut grad: Vec<f32> = clean
                .grad_logits
                .iter()
                .map(|&g| (g as f64 * beta * inv_b) as f32)
                .collect();

            let mut l_no = 0.0;
            if lambda > 0.0 {
                let part = item
                    .partition
                    .ok_or_else(|| Error::Config(format!("no partition for `{}`", s.id)))?;
                let pt = self.teacher_probs(item)?;
                let u = entropy_of(&pt);
                let noisy = noisy_loss_with_grad(&cache.probs, &pt, &u, h, part);
                if noisy.count == 0 {
                    self.counters.empty_gate += 1;
                }
                let w = (lambda * inv_b) as f32;
                for (g, &n) in grad.iter_mut().zip(&noisy.grad_logits) {
                    *g += w * n;
                }
                l_no = noisy.value;
                metrics.noisy += part.s_no;
                metrics.gated += noisy.count;
            }

            let loss = beta * clean.value + lambda * l_no;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: t,
                    ids: vec![s.id.clone()],
                });
            }
            metrics.loss += loss * inv_b;
            metrics.l_cl += clean.value * inv_b;
            metrics.l_no += l_no * inv_b;
            backward(&self.student, &cache, &grad, &mut grads);
        }

        if !grads.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                ids: batch.iter().map(|b| b.sample.id.clone()).collect(),
            });
        }
        self.adam.step(&mut self.student, &grads, metrics.lr, &self.recipe);
        if self.mode == TrainMode::Mpnn {
            ema_update(&mut self.teacher, &self.student, self.cfg.ema_decay)?;
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Runs steps until `t_max`, resuming mid-epoch if needed. `on_step` sees
    /// the state after every step; `on_epoch_end` after each completed epoch
    /// and may stop the run.
    pub fn run(
        &mut self,
        data: &TrainData<'_>,
        mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
        mut on_epoch_end: impl FnMut(&TrainState, u64) -> Result<ControlFlow<()>>,
    ) -> Result<()> {
        let n = data.len();
        let per_epoch = self.recipe.steps_per_epoch(n);
        let batch = self.recipe.batch;
        while self.step < self.t_max {
            let epoch = self.step / per_epoch;
            let order = epoch_order(n, self.seed, epoch);
            let first = (self.step % per_epoch) as usize;
            for chunk in order.chunks(batch).skip(first) {
                let items: Vec<BatchItem<'_>> = chunk.iter().map(|&i| data.item(i)).collect();
                let m = self.train_step(&items)?;
                on_step(self, &m)?;
                if self.step >= self.t_max {
                    break;
                }
            }
            if self.step % per_epoch == 0 || self.step >= self.t_max {
                let done = self.step.div_ceil(per_epoch);
                if on_epoch_end(self, done)?.is_break() {
                    break;
                }
            }
        }
        Ok(())
    }

    /// Model used for evaluation: the teacher in MPNN mode unless asked otherwise.
    pub fn eval_params(&self, use_student: bool) -> &ParamSet<f32> {
        if self.mode == TrainMode::Mpnn && !use_student {
            &self.teacher
        } else {
            &self.student
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut archive = Archive::new(self.student.arch.clone(), self.seed, self.step);
        archive.push_params("student", &self.student);
        archive.push_params("teacher", &self.teacher);
        archive.push_params("adam_m", &self.adam.m);
        archive.push_params("adam_v", &self.adam.v);
        archive.header.extra = serde_json::to_value(StateMeta {
            t_max: self.t_max,
            mode: self.mode,
            ablation: self.ablation,
            recipe: self.recipe.clone(),
            cfg: self.cfg.clone(),
            adam_count: self.adam.count,
            counters: self.counters.clone(),
        })?;
        archive.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive = Archive::read(path)?;
        let meta: StateMeta = serde_json::from_value(archive.header.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("{}: not a training state ({e})", path.display())))?;
        let seed = archive.header.seed;
        Ok(Self {
            student: archive.params("student", seed)?,
            teacher: archive.params("teacher", seed)?,
            adam: Adam {
                m: archive.params("adam_m", seed)?,
                v: archive.params("adam_v", seed)?,
                count: meta.adam_count,
            },
            step: archive.header.step,
            t_max: meta.t_max,
            seed,
            mode: meta.mode,
            ablation: meta.ablation,
            recipe: meta.recipe,
            cfg: meta.cfg,
            counters: meta.counters,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    t_max: u64,
    mode: TrainMode,
    ablation: Ablation,
    recipe: Recipe,
    cfg: NoiseAwareConfig,
    adam_count: u64,
    counters: Counters,
}

/// Training samples with optional per-sample partitions (matched by position).
pub struct TrainData<'a> {
    pub dataset: &'a Dataset,
    pub partitions: Option<&'a [PixelPartition]>,
}

impl<'a> TrainData<'a> {
    pub fn new(dataset: &'a Dataset, partitions: Option<&'a [PixelPartition]>) -> Result<Self> {
        if let Some(p) = partitions {
            if p.len() != dataset.len() {
                return Err(Error::Config(format!(
                    "{} partitions for {} samples",
                    p.len(),
                    dataset.len()
                )));
            }
            for (part, s) in p.iter().zip(dataset.iter()) {
                if part.shape() != s.label.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: vec![s.label.height(), s.label.width()],
                        actual: vec![part.shape().0, part.shape().1],
                    });
                }
            }
        }
        Ok(Self { dataset, partitions })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    fn item(&self, i: usize) -> BatchItem<'a> {
        BatchItem {
            index: i,
            sample: &self.dataset.samples()[i],
            partition: self.partitions.map(|p| &p[i]),
        }
    }
}

/// Plain cross-entropy training on every pixel for `recipe.epochs` epochs.
pub fn train_baseline(
    dataset: &Dataset,
    arch: &ArchDescriptor,
    recipe: &Recipe,
    seed: u64,
) -> Result<ParamSet<f32>> {
    let t_max = recipe.epochs as u64 * recipe.steps_per_epoch(dataset.len());
    let mut state = TrainState::new(
        arch,
        seed,
        TrainMode::Baseline,
        Ablation::None,
        recipe.clone(),
        NoiseAwareConfig::default(),
        t_max,
    )?;
    state.run(&TrainData::new(dataset, None)?, |_, _| Ok(()), |_, _| Ok(ControlFlow::Continue(())))?;
    Ok(state.student)
}

/// Student/teacher training over `recipe.epochs` epochs; returns `(student, teacher)`.
pub fn train_mpnn(
    dataset: &Dataset,
    partitions: &[PixelPartition],
    arch: &ArchDescriptor,
    recipe: &Recipe,
    cfg: &NoiseAwareConfig,
    ablation: Ablation,
    seed: u64,
) -> Result<(ParamSet<f32>, ParamSet<f32>)> {
    let t_max = recipe.epochs as u64 * recipe.steps_per_epoch(dataset.len());
    let mut state = TrainState::new(
        arch,
        seed,
        TrainMode::Mpnn,
        ablation,
        recipe.clone(),
        cfg.clone(),
        t_max,
    )?;
    state.run(
        &TrainData::new(dataset, Some(partitions))?,
        |_, _| Ok(()),
        |_, _| Ok(ControlFlow::Continue(())),
    )?;
    Ok((state.student, state.teacher))
}
