//! Loss machinery of the student/teacher stage: perturbed teacher averaging,
//! entropy uncertainty, clean-pixel cross-entropy, uncertainty-gated
//! consistency on noisy pixels, and the ramp schedules that weight them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datasets::{LabelMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::model::ProbMap;
use crate::mpggd::PixelPartition;
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseAwareConfig {
    /// Number of perturbed teacher inputs, M.
    pub perturbations: usize,
    /// Gaussian noise std in standardized-intensity units.
    pub sigma: f64,
    /// EMA decay of the teacher weights.
    pub ema_decay: f64,
    /// Final consistency weight.
    pub w_max: f64,
    /// Weight of the clean-pixel loss.
    pub beta: f64,
    /// Initial uncertainty threshold as a fraction of `ln C`.
    pub h0_frac: f64,
}

impl Default for NoiseAwareConfig {
    fn default() -> Self {
        Self {
            perturbations: 8,
            sigma: 0.05,
            ema_decay: 0.99,
            w_max: 0.1,
            beta: 1.0,
            h0_frac: 0.75,
        }
    }
}

impl NoiseAwareConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("noise_aware: {m}")));
        if self.perturbations == 0 {
            return bad("perturbations must be at least 1");
        }
        if !(self.sigma >= 0.0) {
            return bad("sigma must be non-negative");
        }
        // 1.0 freezes the teacher, which is occasionally useful for ablations.
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if !(self.w_max >= 0.0) || !self.w_max.is_finite() {
            return bad("w_max must be non-negative");
        }
        if !(self.h0_frac > 0.0 && self.h0_frac <= 1.0) {
            return bad("h0_frac must lie in (0, 1]");
        }
        if !self.beta.is_finite() {
            return bad("beta must be finite");
        }
        Ok(())
    }
}

/// Per-pixel prediction entropy in nats, `0 ≤ u ≤ ln C`.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

/// `M` copies of `image` with independent Gaussian noise, deterministic in `seed`.
pub fn perturb<T: Real>(image: &Tensor3<T>, m: usize, sigma: f64, seed: u64) -> Vec<Tensor3<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma.max(0.0)).expect("finite sigma");
    (0..m)
        .map(|_| {
            let mut x = image.clone();
            if sigma > 0.0 {
                for v in &mut x.data {
                    *v = *v + T::lit(normal.sample(&mut rng));
                }
            }
            x
        })
        .collect()
}

/// Element-wise mean of the teacher's `M` probability maps.
pub fn teacher_mean<T: Real>(stack: &[ProbMap<T>]) -> ProbMap<T> {
    let first = stack.first().expect("non-empty prediction stack");
    let mut out = first.clone();
    for p in &stack[1..] {
        assert_eq!(p.data.len(), out.data.len(), "stack shapes differ");
        for (o, &v) in out.data.iter_mut().zip(&p.data) {
            *o = *o + v;
        }
    }
    let inv = T::one() / T::lit(stack.len() as f64);
    for o in &mut out.data {
        *o = *o * inv;
    }
    out
}

/// Shannon entropy (natural log, `0·ln 0 = 0`) of each pixel of a probability map.
pub fn entropy_of<T: Real>(p: &ProbMap<T>) -> UncertaintyMap {
    let values = (0..p.num_pixels())
        .map(|i| {
            -p.pixel(i)
                .iter()
                .map(|&v| {
                    let v = v.as_f64();
                    if v > 0.0 {
                        v * v.ln()
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .map(|u| u.clamp(0.0, (p.classes as f64).ln()))
        .collect();
    UncertaintyMap {
        height: p.height,
        width: p.width,
        values,
    }
}

/// Entropy of the averaged teacher distribution.
pub fn entropy_map<T: Real>(stack: &[ProbMap<T>]) -> UncertaintyMap {
    entropy_of(&teacher_mean(stack))
}

/// Gaussian ramp `exp(-5 (1 - t/t_max)²)`, saturating at 1 for `t ≥ t_max`.
pub fn ramp(t: u64, t_max: u64) -> f64 {
    if t_max == 0 || t >= t_max {
        return 1.0;
    }
    let x = 1.0 - t as f64 / t_max as f64;
    (-5.0 * x * x).exp()
}

/// Uncertainty gate, ramped from `h0_frac·ln C` to `ln C`.
pub fn threshold_schedule(t: u64, t_max: u64, cfg: &NoiseAwareConfig) -> f64 {
    (cfg.h0_frac + (1.0 - cfg.h0_frac) * ramp(t, t_max)) * (NUM_CLASSES as f64).ln()
}

/// Consistency weight `w_max · ramp(t)`.
pub fn lambda_schedule(t: u64, t_max: u64, cfg: &NoiseAwareConfig) -> f64 {
    cfg.w_max * ramp(t, t_max)
}

/// A loss value with its gradient with respect to the pixel-major logits.
#[derive(Clone, Debug)]
pub struct LossTerm<T> {
    pub value: f64,
    pub grad_logits: Vec<T>,
    /// Pixels that contributed (0 means the term was empty and set to 0).
    pub count: usize,
}

/// Mean cross-entropy `-ln P_s[y]` over clean pixels; 0 when none are clean.
pub fn clean_loss<T: Real>(ps: &ProbMap<T>, y: &LabelMask, part: &PixelPartition) -> f64 {
    clean_loss_with_grad(ps, y, part).value
}

pub fn clean_loss_with_grad<T: Real>(ps: &ProbMap<T>, y: &LabelMask, part: &PixelPartition) -> LossTerm<T> {
    assert_eq!((ps.height, ps.width), y.shape(), "prediction/label shape");
    assert_eq!((ps.height, ps.width), part.shape(), "prediction/partition shape");
    let c = ps.classes;
    let mut grad = vec![T::zero(); ps.data.len()];
    let s_cl = part.s_cl;
    if s_cl == 0 {
        return LossTerm {
            value: 0.0,
            grad_logits: grad,
            count: 0,
        };
    }
    let inv = T::one() / T::lit(s_cl as f64);
    let mut total = 0.0;
    for (i, &clean) in part.clean().iter().enumerate() {
        if !clean {
            continue;
        }
        let label = y.values()[i] as usize;
        let p = ps.pixel(i);
        total -= p[label].as_f64().max(f64::MIN_POSITIVE).ln();
        for k in 0..c {
            let target = if k == label { T::one() } else { T::zero() };
            grad[i * c + k] = (p[k] - target) * inv;
        }
    }
    LossTerm {
        value: total / s_cl as f64,
        grad_logits: grad,
        count: s_cl,
    }
}

/// Mean squared distance `‖P_s − P_t‖²` over noisy pixels whose uncertainty is
/// strictly below `h`; 0 when the gate is empty.
pub fn noisy_loss<T: Real>(
    ps: &ProbMap<T>,
    pt: &ProbMap<T>,
    u: &UncertaintyMap,
    h: f64,
    part: &PixelPartition,
) -> f64 {
    noisy_loss_with_grad(ps, pt, u, h, part).value
}

pub fn noisy_loss_with_grad<T: Real>(
    ps: &ProbMap<T>,
    pt: &ProbMap<T>,
    u: &UncertaintyMap,
    h: f64,
    part: &PixelPartition,
) -> LossTerm<T> {
    assert_eq!(ps.data.len(), pt.data.len(), "student/teacher shape");
    assert_eq!(u.values.len(), ps.num_pixels(), "uncertainty shape");
    assert_eq!((ps.height, ps.width), part.shape(), "prediction/partition shape");
    let c = ps.classes;
    let gated: Vec<usize> = part
        .clean()
        .iter()
        .enumerate()
        .filter(|&(i, &clean)| !clean && u.values[i] < h)
        .map(|(i, _)| i)
        .collect();
    let mut dprob = vec![T::zero(); ps.data.len()];
    if gated.is_empty() {
        return LossTerm {
            value: 0.0,
            grad_logits: dprob,
            count: 0,
        };
    }
    let n = gated.len();
    let scale = T::lit(2.0 / n as f64);
    let mut total = 0.0;
    for &i in &gated {
        let (s, t) = (ps.pixel(i), pt.pixel(i));
        for k in 0..c {
            let d = s[k] - t[k];
            total += d.as_f64() * d.as_f64();
            dprob[i * c + k] = d * scale;
        }
    }
    LossTerm {
        value: total / n as f64,
        grad_logits: ps.softmax_backward(&dprob),
        count: n,
    }
}

/// `β·L_cl + λ(t)·L_no`.
pub fn total_loss(l_cl: f64, l_no: f64, t: u64, t_max: u64, cfg: &NoiseAwareConfig) -> Result<f64> {
    if !l_cl.is_finite() || !l_no.is_finite() {
        return Err(Error::NonFinite("loss term"));
    }
    Ok(cfg.beta * l_cl + lambda_schedule(t, t_max, cfg) * l_no)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn map(h: usize, w: usize, data: Vec<f64>) -> ProbMap<f64> {
        ProbMap::from_vec(h, w, 3, data)
    }

    fn random_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ProbMap<f64> {
        let mut data = Vec::new();
        for _ in 0..h * w {
            let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0f64).powi(3) + 1e-6).collect();
            let s: f64 = raw.iter().sum::<f64>();
            data.extend(raw.iter().map(|v| v / s));
        }
        map(h, w, data)
    }

    #[test]
    fn zero_sigma_copies_and_seed_repeats() {
        let img = Tensor3::from_vec(3, 2, 2, (0..12).map(|v| v as f32).collect());
        let copies = perturb(&img, 3, 0.0, 1);
        assert!(copies.iter().all(|c| *c == img));
        assert_eq!(perturb(&img, 4, 0.1, 9), perturb(&img, 4, 0.1, 9));
        assert_ne!(perturb(&img, 4, 0.1, 9), perturb(&img, 4, 0.1, 10));
    }

    #[test]
    fn perturbation_std_matches_sigma() {
        let img = Tensor3::<f64>::zeros(3, 64, 64);
        let sigma = 0.05;
        let out = perturb(&img, 8, sigma, 3);
        let diffs: Vec<f64> = out.iter().flat_map(|x| x.data.iter().copied()).collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std / sigma - 1.0).abs() < 0.05, "std {std}");
    }

    #[test]
    fn teacher_mean_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let one = random_map(&mut rng, 2, 2);
        assert_eq!(teacher_mean(std::slice::from_ref(&one)), one);

        let a = map(1, 1, vec![0.0, 1.0, 0.0]);
        let b = map(1, 1, vec![0.0, 0.0, 1.0]);
        assert_eq!(teacher_mean(&[a, b]).data, vec![0.0, 0.5, 0.5]);

        let stack: Vec<_> = (0..5).map(|_| random_map(&mut rng, 3, 3)).collect();
        let mean = teacher_mean(&stack);
        for j in 0..mean.data.len() {
            let want = stack.iter().map(|p| p.data[j]).sum::<f64>() / 5.0;
            assert!((mean.data[j] - want).abs() < 1e-15);
        }
        assert!(mean.simplex_error().unwrap() < 1e-12);
    }

    #[test]
    fn entropy_values() {
        let onehot = map(1, 1, vec![0.0, 1.0, 0.0]);
        assert_eq!(entropy_map(&[onehot]).values[0], 0.0);
        let third = 1.0 / 3.0;
        let uniform = map(1, 1, vec![third; 3]);
        assert!((entropy_map(&[uniform]).values[0] - 3f64.ln()).abs() < 1e-12);
        let p = map(1, 1, vec![0.7, 0.2, 0.1]);
        let want = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy_map(&[p]).values[0] - want).abs() < 1e-12);
        assert!((want - 0.8018).abs() < 1e-4);
    }

    #[test]
    fn schedules_at_landmarks() {
        let cfg = NoiseAwareConfig::default();
        let t_max = 1000;
        assert!((lambda_schedule(t_max, t_max, &cfg) - 0.1).abs() < 1e-15);
        assert!((lambda_schedule(0, t_max, &cfg) / 6.737_946_999e-4 - 1.0).abs() < 1e-9);
        assert!((lambda_schedule(500, t_max, &cfg) / 2.865_047_968_6e-2 - 1.0).abs() < 1e-9);
        assert!((threshold_schedule(t_max, t_max, &cfg) - 3f64.ln()).abs() < 1e-12);
        let h0 = (0.75 + 0.25 * (-5f64).exp()) * 3f64.ln();
        assert!((threshold_schedule(0, t_max, &cfg) - h0).abs() < 1e-12);
        assert!((h0 - 0.8259).abs() < 1e-4);
        let hs: Vec<f64> = (0..=4).map(|q| threshold_schedule(q * t_max / 4, t_max, &cfg)).collect();
        assert!(hs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn lambda_strictly_increasing_and_bounded() {
        let cfg = NoiseAwareConfig::default();
        let vals: Vec<f64> = (1..400).map(|t| lambda_schedule(t, 400, &cfg)).collect();
        assert!(vals.windows(2).all(|w| w[0] < w[1]));
        assert!(vals.iter().all(|&v| v <= cfg.w_max));
    }

    #[test]
    fn clean_loss_cases() {
        let part = PixelPartition::from_clean(2, 2, vec![true, false, false, false]);
        let y = LabelMask::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        let mut data = vec![1.0 / 3.0; 12];
        data[..3].copy_from_slice(&[0.5, 0.25, 0.25]);
        let ps = map(2, 2, data);
        assert!((clean_loss(&ps, &y, &part) - 2f64.ln()).abs() < 1e-12);

        let uniform = map(2, 2, vec![1.0 / 3.0; 12]);
        let all = PixelPartition::all_clean(2, 2);
        assert!((clean_loss(&uniform, &y, &all) - 3f64.ln()).abs() < 1e-12);
        assert!((clean_loss(&uniform, &y, &part) - 3f64.ln()).abs() < 1e-12);

        let exact = map(2, 2, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(clean_loss(&exact, &y, &all), 0.0);

        let none = PixelPartition::from_clean(2, 2, vec![false; 4]);
        let term = clean_loss_with_grad(&uniform, &y, &none);
        assert_eq!((term.value, term.count), (0.0, 0));
    }

    #[test]
    fn noisy_loss_cases() {
        let part = PixelPartition::from_clean(1, 2, vec![false, true]);
        let ps = map(1, 2, vec![1.0, 0.0, 0.0, 0.2, 0.3, 0.5]);
        let pt = map(1, 2, vec![0.0, 1.0, 0.0, 0.5, 0.3, 0.2]);
        let u = UncertaintyMap {
            height: 1,
            width: 2,
            values: vec![0.1, 0.1],
        };
        assert_eq!(noisy_loss(&ps, &pt, &u, 0.5, &part), 2.0);
        assert_eq!(noisy_loss(&ps, &ps, &u, 0.5, &part), 0.0);
        // Strict gate: u == H is excluded.
        assert_eq!(noisy_loss(&ps, &pt, &u, 0.1, &part), 0.0);
    }

    #[test]
    fn total_loss_cases() {
        let cfg = NoiseAwareConfig::default();
        assert_eq!(total_loss(0.7, 0.0, 3, 10, &cfg).unwrap(), 0.7);
        assert!((total_loss(0.0, 1.0, 10, 10, &cfg).unwrap() - 0.1).abs() < 1e-15);
        assert!((total_loss(0.5, 0.2, 10, 10, &cfg).unwrap() - 0.52).abs() < 1e-15);
        assert!(total_loss(f64::NAN, 0.0, 0, 10, &cfg).is_err());
        assert!(total_loss(0.0, f64::INFINITY, 0, 10, &cfg).is_err());
    }

    #[test]
    fn gate_shrinks_with_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let stack: Vec<_> = (0..4).map(|_| random_map(&mut rng, 6, 6)).collect();
        let u = entropy_map(&stack);
        let part = PixelPartition::from_clean(6, 6, (0..36).map(|i| i % 3 == 0).collect());
        let gate = |h: f64| -> Vec<usize> {
            (0..36).filter(|&i| !part.clean()[i] && u.values[i] < h).collect()
        };
        for (hi, lo) in [(1.0, 0.8), (0.8, 0.5), (0.5, 0.1)] {
            let big = gate(hi);
            assert!(gate(lo).iter().all(|i| big.contains(i)));
        }
    }

    #[test]
    fn config_validation() {
        assert!(NoiseAwareConfig::default().validate().is_ok());
        let bad = NoiseAwareConfig {
            ema_decay: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseAwareConfig {
            perturbations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
