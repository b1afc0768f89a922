//! Synthetic fundus crops: concentric elliptical disc and cup over a shaded,
//! textured background, with annotations whose boundaries are displaced by a
//! smooth random radial field.

use std::f64::consts::PI;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{resize_rgb, Dataset, ImageSample, LabelMask};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub seed: u64,
    pub count: usize,
    pub side: usize,
    /// Annotation noise level in `[0, 1]`; boundaries are displaced radially by
    /// up to `boundary_noise · NOISE_SCALE` of the radius.
    pub boundary_noise: f64,
}

/// One generated sample before conversion to floating point.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub id: String,
    pub rgb: RgbImage,
    pub clean: LabelMask,
    pub noisy: LabelMask,
}

const HARMONICS: usize = 4;

/// Peak relative radial displacement per unit of `boundary_noise`.
pub const NOISE_SCALE: f64 = 1.0 / 3.0;

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Normalized radius (1 on the boundary) and polar angle in the ellipse frame.
    fn polar(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        ((u * u + v * v).sqrt(), v.atan2(u))
    }
}

/// Smooth periodic field on the circle with peak magnitude 1.
struct RadialField {
    offset: f64,
    coeffs: [(f64, f64); HARMONICS],
}

impl RadialField {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let offset = normal.sample(rng);
        let mut coeffs = [(0.0, 0.0); HARMONICS];
        for (k, c) in coeffs.iter_mut().enumerate() {
            // Higher harmonics decay so the boundary stays smooth.
            let amp = normal.sample(rng) / (k + 1) as f64;
            *c = (amp, rng.random_range(0.0..2.0 * PI));
        }
        let mut field = Self { offset, coeffs };
        let peak = (0..720)
            .map(|i| field.raw(i as f64 * PI / 360.0).abs())
            .fold(0.0, f64::max);
        if peak > 0.0 {
            field.offset /= peak;
            for c in &mut field.coeffs {
                c.0 /= peak;
            }
        }
        field
    }

    fn raw(&self, theta: f64) -> f64 {
        self.offset
            + self
                .coeffs
                .iter()
                .enumerate()
                .map(|(k, (a, phase))| a * ((k + 1) as f64 * theta + phase).cos())
                .sum::<f64>()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn label_at(disc: &Ellipse, cup: &Ellipse, x: f64, y: f64, disc_r: f64, cup_r: f64) -> u8 {
    let (rd, _) = disc.polar(x, y);
    let (rc, _) = cup.polar(x, y);
    if rd < disc_r && rc < cup_r {
        2
    } else if rd < disc_r {
        1
    } else {
        0
    }
}

fn generate_one(seed: u64, index: usize, side: usize, noise: f64) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    let s = side as f64;
    let unit = Normal::new(0.0, 1.0).unwrap();

    let disc_a = s * rng.random_range(0.17..0.24);
    let disc_b = disc_a * rng.random_range(0.85..1.0);
    let disc = Ellipse::new(
        s * (0.5 + rng.random_range(-0.08..0.08)),
        s * (0.5 + rng.random_range(-0.08..0.08)),
        disc_a,
        disc_b,
        rng.random_range(0.0..PI),
    );
    let ratio = rng.random_range(0.35..0.65);
    let shift = (1.0 - ratio) * disc_b * 0.3;
    let cup = Ellipse::new(
        disc.cx + rng.random_range(-shift..shift),
        disc.cy + rng.random_range(-shift..shift),
        disc_a * ratio * rng.random_range(0.9..1.1),
        disc_b * ratio,
        rng.random_range(0.0..PI),
    );
    let disc_field = RadialField::sample(&mut rng);
    let cup_field = RadialField::sample(&mut rng);

    let background = [
        rng.random_range(0.45..0.6),
        rng.random_range(0.18..0.28),
        rng.random_range(0.06..0.12),
    ];
    let disc_tone = [
        rng.random_range(0.78..0.9),
        rng.random_range(0.48..0.6),
        rng.random_range(0.25..0.35),
    ];
    let cup_tone = [
        rng.random_range(0.92..1.0),
        rng.random_range(0.72..0.85),
        rng.random_range(0.5..0.62),
    ];
    let disc_soft = rng.random_range(0.05..0.09);
    let cup_soft = rng.random_range(0.1..0.18);

    let waves: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            let freq = rng.random_range(0.05..0.25);
            let dir = rng.random_range(0.0..2.0 * PI);
            (freq * dir.cos(), freq * dir.sin(), rng.random_range(0.0..2.0 * PI), 0.025)
        })
        .collect();
    // Vessels: straight dark bands running through the disc region.
    let vessels: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let dir = rng.random_range(0.0..PI);
            let off = rng.random_range(-0.5..0.5) * disc_a;
            (dir.cos(), dir.sin(), off, rng.random_range(0.8..1.6))
        })
        .collect();

    let mut rgb = RgbImage::new(side as u32, side as u32);
    let mut clean = LabelMask::filled(side, side, 0);
    let mut noisy = LabelMask::filled(side, side, 0);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (rd, td) = disc.polar(px, py);
            let (rc, tc) = cup.polar(px, py);
            let wd = sigmoid((1.0 - rd) / disc_soft);
            let wc = sigmoid((1.0 - rc) / cup_soft) * wd;
            let dist2 = ((px - s / 2.0).powi(2) + (py - s / 2.0).powi(2)) / (s * s / 4.0);
            let shade = 1.0 - 0.35 * dist2;
            let texture: f64 = waves
                .iter()
                .map(|(kx, ky, ph, amp)| amp * (kx * px + ky * py + ph).sin())
                .sum();
            let vessel: f64 = vessels
                .iter()
                .map(|(c, sn, off, width)| {
                    let d = (px - disc.cx) * sn - (py - disc.cy) * c - off;
                    0.3 * (-(d * d) / (2.0 * width * width)).exp()
                })
                .sum::<f64>()
                .min(0.5);
            let mut pixel = [0u8; 3];
            for c in 0..3 {
                let base = background[c] * (1.0 - wd) + disc_tone[c] * (wd - wc) + cup_tone[c] * wc;
                let v = base * shade * (1.0 - vessel) + texture + 0.015 * unit.sample(&mut rng);
                pixel[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            rgb.put_pixel(x as u32, y as u32, image::Rgb(pixel));

            clean.set(y, x, label_at(&disc, &cup, px, py, 1.0, 1.0));
            let disc_r = 1.0 + noise * NOISE_SCALE * disc_field.raw(td);
            let cup_r = 1.0 + noise * NOISE_SCALE * cup_field.raw(tc);
            let noisy_disc = rd < disc_r;
            let noisy_cup = rc < cup_r;
            // Annotated independently: a perturbed cup may spill past the perturbed disc.
            let label = if noisy_cup {
                2
            } else if noisy_disc {
                1
            } else {
                0
            };
            noisy.set(y, x, label);
        }
    }
    if noise == 0.0 {
        noisy = clean.clone();
    }
    SynthSample {
        id: format!("s{index:04}"),
        rgb,
        clean,
        noisy,
    }
}

/// Raw generator output (8-bit images plus clean and noisy masks).
pub fn synth_samples(params: &SynthParams) -> Result<Vec<SynthSample>> {
    if params.count == 0 {
        return Err(Error::Config("synthetic count must be positive".into()));
    }
    if params.side < 32 {
        return Err(Error::Config("synthetic side must be at least 32".into()));
    }
    if !(0.0..=1.0).contains(&params.boundary_noise) {
        return Err(Error::Config("boundary_noise must lie in [0, 1]".into()));
    }
    Ok((0..params.count)
        .map(|i| generate_one(params.seed, i, params.side, params.boundary_noise))
        .collect())
}

/// Returns `(noisy, clean)` datasets over the same images, scaled to `[0, 1]`.
pub fn synth_generate(params: &SynthParams) -> Result<(Dataset, Dataset)> {
    let raw = synth_samples(params)?;
    let mut noisy = Vec::with_capacity(raw.len());
    let mut clean = Vec::with_capacity(raw.len());
    for s in raw {
        let image = resize_rgb(&s.rgb, params.side);
        noisy.push(ImageSample::new(s.id.clone(), image.clone(), s.noisy)?);
        clean.push(ImageSample::new(s.id, image, s.clean)?);
    }
    Ok((Dataset::new(noisy)?, Dataset::new(clean)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(noise: f64) -> SynthParams {
        SynthParams {
            seed: 7,
            count: 6,
            side: 48,
            boundary_noise: noise,
        }
    }

    #[test]
    fn zero_noise_masks_are_exact() {
        let (noisy, clean) = synth_generate(&params(0.0)).unwrap();
        for (n, c) in noisy.iter().zip(clean.iter()) {
            assert_eq!(n.label, c.label);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(&params(0.3)).unwrap();
        let b = synth_generate(&params(0.3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clean_cup_inside_disc_and_both_present() {
        let (noisy, clean) = synth_generate(&params(0.5)).unwrap();
        for (n, c) in noisy.iter().zip(clean.iter()) {
            assert_eq!(c.label.classes_present(), vec![0, 1, 2]);
            assert!(n.label.values().iter().all(|&v| v <= 2));
            assert_eq!(n.image, c.image);
        }
    }

    #[test]
    fn preconditions_checked() {
        let mut p = params(0.1);
        p.side = 16;
        assert!(synth_generate(&p).is_err());
        p.side = 32;
        p.count = 0;
        assert!(synth_generate(&p).is_err());
    }

    #[test]
    fn field_peak_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let f = RadialField::sample(&mut rng);
            let peak = (0..720)
                .map(|i| f.raw(i as f64 * PI / 360.0).abs())
                .fold(0.0, f64::max);
            assert!((peak - 1.0).abs() < 1e-9);
        }
    }

    fn mean_agreement(noise: f64) -> f64 {
        let p = SynthParams {
            seed: 0,
            count: 60,
            side: 64,
            boundary_noise: noise,
        };
        let (noisy, clean) = synth_generate(&p).unwrap();
        let mut total = 0.0;
        for (n, c) in noisy.iter().zip(clean.iter()) {
            total += crate::evaluate::dice(&n.label, &c.label, 1) + crate::evaluate::dice(&n.label, &c.label, 2);
        }
        total / (2.0 * noisy.len() as f64)
    }

    // Calibration of the default noise level; retuning NOISE_SCALE moves this.
    #[test]
    fn annotation_agreement_band() {
        let d = mean_agreement(0.3);
        assert!((0.91..0.95).contains(&d), "{d}");
        assert!(mean_agreement(0.6) < d);
        assert!(mean_agreement(0.1) > d);
    }
}
