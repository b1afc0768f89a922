//! LinkNet-style encoder-decoder with hand-written backpropagation.
//!
//! Topology for `widths = [w0, w1, ..., w(L-1)]`:
//!
//! * stem: 3×3 conv `in → w0`, ReLU, full resolution;
//! * encoder level `l ≥ 1`: residual block at half the previous resolution,
//!   `relu(conv3x3(relu(conv3x3_s2(e))) + conv1x1_s2(e))`;
//! * decoder level `l`: 1×1 reduce to `max(w_l/4, 1)`, 2×2 stride-2
//!   transposed conv, 1×1 expand to `w(l-1)` (each followed by ReLU), then
//!   added to the encoder output of level `l-1`;
//! * head: 3×3 conv `w0 → w0`, ReLU, 1×1 conv to class logits, softmax.

mod checkpoint;
mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_params, save_params, Archive, ArchiveHeader};
use layers::{relu_backward, Conv, Deconv};

use crate::datasets::{LabelMask, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor3};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Channel width per resolution level; `widths.len()` is the depth.
    pub widths: Vec<usize>,
}

impl ArchDescriptor {
    /// Three levels with narrow channels, sized for 64×64 CPU runs.
    pub fn tiny() -> Self {
        Self {
            in_channels: 3,
            num_classes: NUM_CLASSES,
            widths: vec![16, 32, 64],
        }
    }

    /// ResNet-18-like widths for 256×256 inputs.
    pub fn linknet() -> Self {
        Self {
            in_channels: 3,
            num_classes: NUM_CLASSES,
            widths: vec![32, 64, 128, 256, 512],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny()),
            "linknet" => Ok(Self::linknet()),
            other => Err(Error::InvalidArch(format!("unknown preset `{other}`"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidArch("in_channels must be positive".into()));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::InvalidArch(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.widths.len() < 2 {
            return Err(Error::InvalidArch("need at least two levels".into()));
        }
        if self.widths.len() > 8 {
            return Err(Error::InvalidArch("at most eight levels".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArch("widths must be positive".into()));
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Input sides must be a positive multiple of this.
    pub fn divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    fn bottleneck(&self, level: usize) -> usize {
        (self.widths[level] / 4).max(1)
    }

    fn layers(&self) -> Vec<(String, Layer)> {
        let w = &self.widths;
        let conv = |cin, cout, kernel, stride| Layer::Conv(Conv { cin, cout, kernel, stride });
        let mut out = vec![("stem".to_string(), conv(self.in_channels, w[0], 3, 1))];
        for l in 1..self.levels() {
            out.push((format!("enc{l}.conv_a"), conv(w[l - 1], w[l], 3, 2)));
            out.push((format!("enc{l}.conv_b"), conv(w[l], w[l], 3, 1)));
            out.push((format!("enc{l}.down"), conv(w[l - 1], w[l], 1, 2)));
        }
        for l in (1..self.levels()).rev() {
            let m = self.bottleneck(l);
            out.push((format!("dec{l}.reduce"), conv(w[l], m, 1, 1)));
            out.push((format!("dec{l}.up"), Layer::Deconv(Deconv { cin: m, cout: m })));
            out.push((format!("dec{l}.expand"), conv(m, w[l - 1], 1, 1)));
        }
        out.push(("head.conv".into(), conv(w[0], w[0], 3, 1)));
        out.push(("head.out".into(), conv(w[0], self.num_classes, 1, 1)));
        out
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (name, layer) in self.layers() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("{name}.weight"), vec![c.cout, c.cin, c.kernel, c.kernel]));
                    out.push((format!("{name}.bias"), vec![c.cout]));
                }
                Layer::Deconv(d) => {
                    out.push((format!("{name}.weight"), vec![d.cin, d.cout, 2, 2]));
                    out.push((format!("{name}.bias"), vec![d.cout]));
                }
            }
        }
        out
    }

    fn enc_index(&self, level: usize) -> usize {
        1 + 3 * (level - 1)
    }

    fn dec_index(&self, level: usize) -> usize {
        1 + 3 * (self.levels() - 1) + 3 * (self.levels() - 1 - level)
    }

    fn head_index(&self) -> usize {
        1 + 6 * (self.levels() - 1)
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv(Conv),
    Deconv(Deconv),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Weights of one network instance plus the seed it was initialized from.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub arch: ArchDescriptor,
    pub seed: u64,
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Real> ParamSet<T> {
    /// He-normal weights, zero biases; deterministic in `seed`.
    pub fn init(arch: &ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for (name, shape) in arch.param_shapes() {
            let len: usize = shape.iter().product();
            let data = if name.ends_with(".bias") {
                vec![T::zero(); len]
            } else {
                let fan_in = if name.ends_with(".up.weight") {
                    shape[0]
                } else {
                    shape[1..].iter().product()
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                (0..len).map(|_| T::lit(normal.sample(&mut rng))).collect()
            };
            tensors.push(NamedTensor { name, shape, data });
        }
        Ok(Self {
            arch: arch.clone(),
            seed,
            tensors,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: vec![T::zero(); t.data.len()],
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            arch: self.arch.clone(),
            seed: self.seed,
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let shapes = |p: &Self| -> Vec<usize> {
            p.tensors.iter().flat_map(|t| t.shape.iter().copied().chain([0])).collect()
        };
        if self.arch != other.arch || shapes(self) != shapes(other) {
            return Err(Error::ShapeMismatch {
                expected: shapes(self),
                actual: shapes(other),
            });
        }
        Ok(())
    }

    /// Euclidean distance over all parameters.
    pub fn distance(&self, other: &Self) -> f64 {
        self.values()
            .zip(other.values())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for v in self.values_mut() {
            *v = *v * factor;
        }
    }

    fn weight(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer].data
    }

    fn bias(&self, layer: usize) -> &[T] {
        &self.tensors[2 * layer + 1].data
    }

    fn grads_mut(&mut self, layer: usize) -> (&mut [T], &mut [T]) {
        let (w, b) = self.tensors[2 * layer..2 * layer + 2].split_at_mut(1);
        (&mut w[0].data, &mut b[0].data)
    }
}

/// Per-pixel class probabilities, stored pixel-major (`H×W×C`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap<T> {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub data: Vec<T>,
}

impl<T: Real> ProbMap<T> {
    pub fn from_vec(height: usize, width: usize, classes: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), height * width * classes);
        Self {
            height,
            width,
            classes,
            data,
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[T] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn pixel_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.classes..(i + 1) * self.classes]
    }

    /// Softmax over channel-major logits.
    pub fn softmax(logits: &Tensor3<T>) -> Self {
        let (c, n) = (logits.channels, logits.plane_len());
        let mut data = vec![T::zero(); n * c];
        for i in 0..n {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(logits.data[k * n + i]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (logits.data[k * n + i] - max).exp();
                data[i * c + k] = e;
                sum = sum + e;
            }
            for k in 0..c {
                data[i * c + k] = data[i * c + k] / sum;
            }
        }
        Self::from_vec(logits.height, logits.width, c, data)
    }

    /// Maps a gradient with respect to probabilities onto the logits.
    pub fn softmax_backward(&self, dprob: &[T]) -> Vec<T> {
        let c = self.classes;
        let mut out = vec![T::zero(); self.data.len()];
        for i in 0..self.num_pixels() {
            let p = self.pixel(i);
            let g = &dprob[i * c..(i + 1) * c];
            let dot = p.iter().zip(g).fold(T::zero(), |a, (&p, &g)| a + p * g);
            for k in 0..c {
                out[i * c + k] = p[k] * (g[k] - dot);
            }
        }
        out
    }

    /// Arg-max decode; ties resolve to the lower class index.
    pub fn argmax(&self) -> LabelMask {
        let values = (0..self.num_pixels())
            .map(|i| {
                let p = self.pixel(i);
                let mut best = 0;
                for k in 1..self.classes {
                    if p[k] > p[best] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMask::new(self.height, self.width, values).expect("class count matches alphabet")
    }

    /// Largest deviation of any pixel's sum from 1, or `None` if a value is negative.
    pub fn simplex_error(&self) -> Option<f64> {
        let mut worst = 0.0f64;
        for i in 0..self.num_pixels() {
            let p = self.pixel(i);
            if p.iter().any(|&v| v < T::zero()) {
                return None;
            }
            let sum = p.iter().fold(0.0, |a, &v| a + v.as_f64());
            worst = worst.max((sum - 1.0).abs());
        }
        Some(worst)
    }
}

/// Activations kept from a forward pass for [`backward`].
pub struct ForwardCache<T> {
    input_hw: (usize, usize),
    cols: Vec<Vec<T>>,
    stem: Tensor3<T>,
    enc_a: Vec<Tensor3<T>>,
    enc: Vec<Tensor3<T>>,
    dec_r: Vec<Tensor3<T>>,
    dec_u: Vec<Tensor3<T>>,
    dec_v: Vec<Tensor3<T>>,
    dec_out: Tensor3<T>,
    head_h: Tensor3<T>,
    pub probs: ProbMap<T>,
}

fn check_input<T: Real>(arch: &ArchDescriptor, image: &Tensor3<T>) -> Result<()> {
    let d = arch.divisor();
    if image.channels != arch.in_channels
        || image.height == 0
        || image.width == 0
        || image.height % d != 0
        || image.width % d != 0
    {
        return Err(Error::ShapeMismatch {
            expected: vec![arch.in_channels, d, d],
            actual: image.shape().to_vec(),
        });
    }
    if !image.is_finite() {
        return Err(Error::NonFinite("network input"));
    }
    Ok(())
}

fn conv_at(arch_layers: &[(String, Layer)], idx: usize) -> Conv {
    match arch_layers[idx].1 {
        Layer::Conv(c) => c,
        Layer::Deconv(_) => unreachable!("layer {idx} is a convolution"),
    }
}

fn deconv_at(arch_layers: &[(String, Layer)], idx: usize) -> Deconv {
    match arch_layers[idx].1 {
        Layer::Deconv(d) => d,
        Layer::Conv(_) => unreachable!("layer {idx} is a transposed convolution"),
    }
}

/// Forward pass keeping every activation needed for backpropagation.
pub fn forward_train<T: Real>(params: &ParamSet<T>, image: &Tensor3<T>) -> Result<ForwardCache<T>> {
    let arch = &params.arch;
    check_input(arch, image)?;
    let layers = arch.layers();
    let levels = arch.levels();
    let mut cols = vec![Vec::new(); layers.len()];

    let run_conv = |idx: usize, x: &Tensor3<T>, relu: bool, cols: &mut Vec<Vec<T>>| {
        let conv = conv_at(&layers, idx);
        let (mut y, c) = conv.forward(params.weight(idx), params.bias(idx), x);
        cols[idx] = c;
        if relu {
            y.relu_inplace();
        }
        y
    };

    let stem = run_conv(0, image, true, &mut cols);
    let mut enc_a = Vec::with_capacity(levels - 1);
    let mut enc = vec![stem.clone()];
    for l in 1..levels {
        let base = arch.enc_index(l);
        let a = run_conv(base, &enc[l - 1], true, &mut cols);
        let mut e = run_conv(base + 1, &a, false, &mut cols);
        let shortcut = run_conv(base + 2, &enc[l - 1], false, &mut cols);
        e.add_assign(&shortcut);
        e.relu_inplace();
        enc_a.push(a);
        enc.push(e);
    }

    let mut dec_r = vec![Tensor3::zeros(0, 0, 0); levels];
    let mut dec_u = vec![Tensor3::zeros(0, 0, 0); levels];
    let mut dec_v = vec![Tensor3::zeros(0, 0, 0); levels];
    let mut d = enc[levels - 1].clone();
    for l in (1..levels).rev() {
        let base = arch.dec_index(l);
        let r = run_conv(base, &d, true, &mut cols);
        let up = deconv_at(&layers, base + 1);
        let mut u = up.forward(params.weight(base + 1), params.bias(base + 1), &r);
        u.relu_inplace();
        let v = run_conv(base + 2, &u, true, &mut cols);
        d = v.clone();
        d.add_assign(&enc[l - 1]);
        dec_r[l] = r;
        dec_u[l] = u;
        dec_v[l] = v;
    }

    let head = arch.head_index();
    let h = run_conv(head, &d, true, &mut cols);
    let logits = run_conv(head + 1, &h, false, &mut cols);
    let probs = ProbMap::softmax(&logits);
    Ok(ForwardCache {
        input_hw: (image.height, image.width),
        cols,
        stem,
        enc_a,
        enc,
        dec_r,
        dec_u,
        dec_v,
        dec_out: d,
        head_h: h,
        probs,
    })
}

/// Class probabilities for one image.
pub fn forward<T: Real>(params: &ParamSet<T>, image: &Tensor3<T>) -> Result<ProbMap<T>> {
    Ok(forward_train(params, image)?.probs)
}

pub fn predict_mask<T: Real>(params: &ParamSet<T>, image: &Tensor3<T>) -> Result<LabelMask> {
    Ok(forward(params, image)?.argmax())
}

/// Accumulates into `grads` the parameter gradient given `dlogits`, the loss
/// gradient with respect to the pixel-major (`H×W×C`) logits.
pub fn backward<T: Real>(
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    dlogits: &[T],
    grads: &mut ParamSet<T>,
) {
    let arch = &params.arch;
    let layers = arch.layers();
    let levels = arch.levels();
    let (h, w) = (cache.probs.height, cache.probs.width);
    let c = cache.probs.classes;
    let n = h * w;

    let mut dz = Tensor3::zeros(c, h, w);
    for i in 0..n {
        for k in 0..c {
            dz.data[k * n + i] = dlogits[i * c + k];
        }
    }

    let conv_back = |idx: usize,
                     in_hw: (usize, usize),
                     dout: &Tensor3<T>,
                     grads: &mut ParamSet<T>,
                     want: bool|
     -> Option<Tensor3<T>> {
        let conv = conv_at(&layers, idx);
        let (dw, db) = grads.grads_mut(idx);
        conv.backward(params.weight(idx), &cache.cols[idx], in_hw, dout, dw, db, want)
    };
    let hw = |t: &Tensor3<T>| (t.height, t.width);

    let head = arch.head_index();
    let mut dh = conv_back(head + 1, hw(&cache.head_h), &dz, grads, true).unwrap();
    relu_backward(&cache.head_h, &mut dh);
    let mut dd = conv_back(head, hw(&cache.dec_out), &dh, grads, true).unwrap();

    let mut denc: Vec<Option<Tensor3<T>>> = vec![None; levels];
    let accumulate = |slot: &mut Option<Tensor3<T>>, g: Tensor3<T>| match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    };

    for l in 1..levels {
        let base = arch.dec_index(l);
        accumulate(&mut denc[l - 1], dd.clone());
        let mut dv = dd;
        relu_backward(&cache.dec_v[l], &mut dv);
        let mut du = conv_back(base + 2, hw(&cache.dec_u[l]), &dv, grads, true).unwrap();
        relu_backward(&cache.dec_u[l], &mut du);
        let up = deconv_at(&layers, base + 1);
        let mut dr = {
            let (dw, db) = grads.grads_mut(base + 1);
            up.backward(params.weight(base + 1), &cache.dec_r[l], &du, dw, db)
        };
        relu_backward(&cache.dec_r[l], &mut dr);
        // Decoder `l` consumes a tensor shaped like encoder level `l`.
        dd = conv_back(base, hw(&cache.enc[l]), &dr, grads, true).unwrap();
    }
    accumulate(&mut denc[levels - 1], dd);

    for l in (1..levels).rev() {
        let base = arch.enc_index(l);
        let mut g = denc[l].take().expect("gradient reaches every encoder level");
        relu_backward(&cache.enc[l], &mut g);
        let prev_hw = hw(&cache.enc[l - 1]);
        let mut da = conv_back(base + 1, hw(&cache.enc_a[l - 1]), &g, grads, true).unwrap();
        let dshort = conv_back(base + 2, prev_hw, &g, grads, true).unwrap();
        accumulate(&mut denc[l - 1], dshort);
        relu_backward(&cache.enc_a[l - 1], &mut da);
        let dprev = conv_back(base, prev_hw, &da, grads, true).unwrap();
        accumulate(&mut denc[l - 1], dprev);
    }

    let mut ds = denc[0].take().expect("stem gradient");
    relu_backward(&cache.stem, &mut ds);
    conv_back(0, cache.input_hw, &ds, grads, false);
}

/// Anything that maps an image to a label mask.
pub trait Segmenter {
    fn segment(&self, image: &Tensor3<f32>) -> Result<LabelMask>;
}

impl Segmenter for ParamSet<f32> {
    fn segment(&self, image: &Tensor3<f32>) -> Result<LabelMask> {
        predict_mask(self, image)
    }
}
