//! Image/mask containers, RIGA-layout loading, preprocessing and a synthetic
//! fundus generator.

mod riga;
mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor3;

pub use riga::{load_riga_split, mask_path, RaterSelector};
pub use synth::{synth_generate, synth_samples, SynthParams, SynthSample};

/// Background, optic disc, optic cup.
pub const NUM_CLASSES: usize = 3;

/// Per-pixel class map with values in `{0, 1, 2}`.
///
/// Cup pixels are not required to lie inside the disc; raw annotations can
/// violate that and are kept as they are.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl std::fmt::Debug for LabelMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LabelMask({}x{})", self.height, self.width)
    }
}

impl LabelMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch {
                expected: vec![height, width],
                actual: vec![values.len()],
            });
        }
        if let Some(&bad) = values.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                id: String::new(),
                value: bad,
            });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        assert!((class as usize) < NUM_CLASSES);
        Self {
            height,
            width,
            values: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        assert!((class as usize) < NUM_CLASSES);
        self.values[y * self.width + x] = class;
    }

    /// Sorted distinct labels present in the mask.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; NUM_CLASSES];
        for &v in &self.values {
            seen[v as usize] = true;
        }
        (0..NUM_CLASSES as u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.values.iter().filter(|&&v| v == class).count()
    }

    pub fn check_same_shape(&self, other: &LabelMask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.height, self.width],
                actual: vec![other.height, other.width],
            });
        }
        Ok(())
    }

    /// Reads a single-channel raster whose pixel values are the labels.
    pub fn load(path: &Path, id: &str) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let values = img.into_raw();
        if let Some(&bad) = values.iter().find(|&&v| v as usize >= NUM_CLASSES) {
            return Err(Error::InvalidLabel {
                id: id.to_string(),
                value: bad,
            });
        }
        Ok(Self {
            height: h as usize,
            width: w as usize,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
        }
        let img = GrayImage::from_raw(self.width as u32, self.height as u32, self.values.clone())
            .expect("buffer matches dimensions");
        img.save(path)?;
        Ok(())
    }
}

/// One image with its annotation.
///
/// `image` is stored channel-major (`3×H×W`); it holds intensities in `[0, 1]`
/// after loading and standardized values after [`Dataset::standardize`].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub image: Tensor3<f32>,
    pub label: LabelMask,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Tensor3<f32>, label: LabelMask) -> Result<Self> {
        let id = id.into();
        if image.channels != 3 || (image.height, image.width) != label.shape() {
            return Err(Error::ShapeMismatch {
                expected: vec![3, label.height(), label.width()],
                actual: image.shape().to_vec(),
            });
        }
        if !image.is_finite() {
            return Err(Error::NonFinite("image"));
        }
        Ok(Self { id, image, label })
    }
}

/// Ordered, non-empty collection of samples with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn new(samples: Vec<ImageSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::NoSamples(Default::default()));
        }
        let mut seen = HashSet::new();
        for s in &samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id `{}`", s.id)));
            }
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[ImageSample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImageSample> {
        self.samples.iter()
    }

    pub fn get(&self, id: &str) -> Option<&ImageSample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Same images, labels replaced by `labels` (matched by position).
    pub fn with_labels(&self, labels: Vec<LabelMask>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.len()],
                actual: vec![labels.len()],
            });
        }
        let samples = self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, label)| ImageSample::new(s.id.clone(), s.image.clone(), label))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples)
    }

    pub fn standardize(&mut self, stats: &ChannelStats) {
        for s in &mut self.samples {
            stats.apply(&mut s.image);
        }
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Dataset::new(self.samples[range].to_vec())
    }
}

/// Per-pixel plurality over `R` rater masks; ties go to the lower class.
pub fn majority_vote(masks: &[LabelMask]) -> Result<LabelMask> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Config("majority vote needs at least one mask".into()))?;
    for m in &masks[1..] {
        first.check_same_shape(m)?;
    }
    let mut values = Vec::with_capacity(first.len());
    for i in 0..first.len() {
        let mut counts = [0usize; NUM_CLASSES];
        for m in masks {
            counts[m.values[i] as usize] += 1;
        }
        let mut best = 0;
        for c in 1..NUM_CLASSES {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        values.push(best as u8);
    }
    Ok(LabelMask {
        height: first.height,
        width: first.width,
        values,
    })
}

/// Nearest-neighbour resize to `side×side`; the label alphabet is preserved.
pub fn resize_mask(mask: &LabelMask, side: usize) -> LabelMask {
    if mask.shape() == (side, side) {
        return mask.clone();
    }
    let src = |dst: usize, src_len: usize| ((2 * dst + 1) * src_len) / (2 * side);
    let mut values = Vec::with_capacity(side * side);
    for y in 0..side {
        let sy = src(y, mask.height).min(mask.height - 1);
        for x in 0..side {
            let sx = src(x, mask.width).min(mask.width - 1);
            values.push(mask.get(sy, sx));
        }
    }
    LabelMask {
        height: side,
        width: side,
        values,
    }
}

/// Bilinear resize (half-pixel centres) of an RGB raster to `side×side`,
/// scaled to `[0, 1]`. A same-size input is copied exactly.
pub fn resize_rgb(raw: &RgbImage, side: usize) -> Tensor3<f32> {
    let (w0, h0) = (raw.width() as usize, raw.height() as usize);
    let px = |c: usize, y: usize, x: usize| raw.as_raw()[(y * w0 + x) * 3 + c] as f64 / 255.0;
    let mut out = Tensor3::zeros(3, side, side);
    let coord = |dst: usize, src_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / side as f64 - 0.5)
            .clamp(0.0, (src_len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    for y in 0..side {
        let (y0, y1, fy) = coord(y, h0);
        for x in 0..side {
            let (x0, x1, fx) = coord(x, w0);
            for c in 0..3 {
                let top = px(c, y0, x0) * (1.0 - fx) + px(c, y0, x1) * fx;
                let bottom = px(c, y1, x0) * (1.0 - fx) + px(c, y1, x1) * fx;
                out.data[(c * side + y) * side + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

/// Dataset-level per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor3<f32>>) -> Result<Self> {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        let images: Vec<_> = images.into_iter().collect();
        for img in &images {
            for (c, s) in sum.iter_mut().enumerate() {
                *s += img.plane(c).iter().map(|&v| v as f64).sum::<f64>();
            }
            n += img.plane_len();
        }
        if n == 0 {
            return Err(Error::Config("no pixels to compute channel statistics".into()));
        }
        let mean = sum.map(|s| s / n as f64);
        for img in &images {
            for (c, q) in sq.iter_mut().enumerate() {
                *q += img
                    .plane(c)
                    .iter()
                    .map(|&v| (v as f64 - mean[c]).powi(2))
                    .sum::<f64>();
            }
        }
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n as f64).sqrt();
            if std[c] <= 1e-12 {
                return Err(Error::ZeroVariance { channel: c });
            }
        }
        Ok(Self { mean, std })
    }

    pub fn of_dataset(ds: &Dataset) -> Result<Self> {
        Self::compute(ds.iter().map(|s| &s.image))
    }

    pub fn apply(&self, img: &mut Tensor3<f32>) {
        let n = img.plane_len();
        for c in 0..3 {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in &mut img.data[c * n..(c + 1) * n] {
                *v = ((*v as f64 - m) / s) as f32;
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io_at(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io_at(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Resize then standardize a raw RGB image with frozen statistics.
pub fn preprocess(raw: &RgbImage, side: usize, stats: &ChannelStats) -> Result<Tensor3<f32>> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(Error::Config("empty image".into()));
    }
    let mut img = resize_rgb(raw, side);
    stats.apply(&mut img);
    if !img.is_finite() {
        return Err(Error::NonFinite("preprocessed image"));
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> LabelMask {
        let values = (0..h * w).map(|_| rng.random_range(0..3u8)).collect();
        LabelMask::new(h, w, values).unwrap()
    }

    #[test]
    fn label_values_outside_alphabet_rejected() {
        assert!(matches!(
            LabelMask::new(1, 2, vec![0, 3]),
            Err(Error::InvalidLabel { value: 3, .. })
        ));
    }

    #[test]
    fn single_voter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mask(&mut rng, 5, 7);
        assert_eq!(majority_vote(std::slice::from_ref(&m)).unwrap(), m);
    }

    #[test]
    fn three_way_tie_goes_to_background() {
        let masks: Vec<_> = [0u8, 0, 1, 1, 2, 2]
            .iter()
            .map(|&c| LabelMask::filled(1, 1, c))
            .collect();
        assert_eq!(majority_vote(&masks).unwrap().get(0, 0), 0);
        let masks: Vec<_> = [2u8, 1, 2, 1]
            .iter()
            .map(|&c| LabelMask::filled(1, 1, c))
            .collect();
        assert_eq!(majority_vote(&masks).unwrap().get(0, 0), 1);
    }

    #[test]
    fn vote_shape_mismatch_is_error() {
        let a = LabelMask::filled(2, 2, 0);
        let b = LabelMask::filled(2, 3, 0);
        assert!(matches!(
            majority_vote(&[a, b]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn vote_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let masks: Vec<_> = (0..6).map(|_| random_mask(&mut rng, 8, 8)).collect();
            let voted = majority_vote(&masks).unwrap();
            for y in 0..8 {
                for x in 0..8 {
                    let votes: Vec<u8> = masks.iter().map(|m| m.get(y, x)).collect();
                    let count = |c: u8| votes.iter().filter(|&&v| v == c).count();
                    let top = (0..3u8).map(count).max().unwrap();
                    let want = (0..3u8).find(|&c| count(c) == top).unwrap();
                    assert_eq!(voted.get(y, x), want);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn vote_is_permutation_invariant(seed in any::<u64>(), shift in 0usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks: Vec<_> = (0..6).map(|_| random_mask(&mut rng, 4, 4)).collect();
            let mut rotated = masks.clone();
            rotated.rotate_left(shift);
            rotated.reverse();
            prop_assert_eq!(majority_vote(&masks).unwrap(), majority_vote(&rotated).unwrap());
        }
    }

    #[test]
    fn nearest_resize_upsamples_in_blocks() {
        let m = LabelMask::new(2, 2, vec![0, 1, 1, 2]).unwrap();
        let up = resize_mask(&m, 4);
        #[rustfmt::skip]
        let want = vec![
            0, 0, 1, 1,
            0, 0, 1, 1,
            1, 1, 2, 2,
            1, 1, 2, 2,
        ];
        assert_eq!(up.values(), &want[..]);
        assert_eq!(resize_mask(&m, 2), m);
    }

    #[test]
    fn resize_never_invents_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..100 {
            let h = rng.random_range(1..20);
            let w = rng.random_range(1..20);
            let mut m = LabelMask::filled(h, w, 0);
            let allowed: Vec<u8> = if i % 2 == 0 { vec![0, 2] } else { vec![0, 1, 2] };
            for y in 0..h {
                for x in 0..w {
                    m.set(y, x, allowed[rng.random_range(0..allowed.len())]);
                }
            }
            let side = rng.random_range(1..33);
            let out = resize_mask(&m, side);
            let present = m.classes_present();
            assert!(out.classes_present().iter().all(|c| present.contains(c)));
        }
    }

    fn gradient_image(h: u32, w: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            image::Rgb([(x * 7 + y) as u8, (y * 5) as u8, ((x ^ y) * 3) as u8])
        })
    }

    #[test]
    fn same_size_resize_is_identity() {
        let raw = gradient_image(16, 16);
        let out = resize_rgb(&raw, 16);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let want = raw.get_pixel(x as u32, y as u32)[c] as f32 / 255.0;
                    assert_eq!(out.at(c, y, x), want);
                }
            }
        }
    }

    #[test]
    fn constant_image_has_zero_variance() {
        let raw = RgbImage::from_pixel(8, 8, image::Rgb([100, 100, 100]));
        let img = resize_rgb(&raw, 8);
        assert!(matches!(
            ChannelStats::compute([&img]),
            Err(Error::ZeroVariance { channel: 0 })
        ));
    }

    #[test]
    fn standardized_training_set_has_unit_statistics() {
        let raws: Vec<_> = (0..4).map(|i| gradient_image(20 + i, 24)).collect();
        let resized: Vec<_> = raws.iter().map(|r| resize_rgb(r, 16)).collect();
        let stats = ChannelStats::compute(&resized).unwrap();
        let processed: Vec<_> = raws
            .iter()
            .map(|r| preprocess(r, 16, &stats).unwrap())
            .collect();
        for c in 0..3 {
            let vals: Vec<f64> = processed
                .iter()
                .flat_map(|t| t.plane(c).iter().map(|&v| v as f64))
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((std - 1.0).abs() < 1e-6, "std {std}");
        }
        let again = preprocess(&raws[0], 16, &stats).unwrap();
        assert_eq!(again, processed[0]);
    }
}
