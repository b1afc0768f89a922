//! Convolution primitives on single `C×H×W` samples, forward and backward.

use crate::tensor::{matmul, Real, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    /// Unfolds `x` into a `(cin·k·k) × (ho·wo)` matrix.
    fn im2col<T: Real>(&self, x: &Tensor3<T>, ho: usize, wo: usize) -> Vec<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        if k == 1 && s == 1 {
            return x.data.clone();
        }
        let (h, w) = (x.height as isize, x.width as isize);
        let n = ho * wo;
        let mut cols = vec![T::zero(); self.patch_len() * n];
        for c in 0..self.cin {
            let plane = x.plane(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let src = &plane[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                        let out = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Tensor3<T> {
        let (k, s, p) = (self.kernel, self.stride, self.pad() as isize);
        if k == 1 && s == 1 {
            return Tensor3::from_vec(self.cin, h, w, cols.to_vec());
        }
        let n = ho * wo;
        let mut dx = Tensor3::zeros(self.cin, h, w);
        for c in 0..self.cin {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the unfolded input needed by [`Conv::backward`].
    pub fn forward<T: Real>(&self, weight: &[T], bias: &[T], x: &Tensor3<T>) -> (Tensor3<T>, Vec<T>) {
        debug_assert_eq!(x.channels, self.cin);
        let (ho, wo) = self.out_size(x.height, x.width);
        let cols = self.im2col(x, ho, wo);
        let n = ho * wo;
        let mut out = Tensor3::zeros(self.cout, ho, wo);
        for (co, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(bias[co]);
        }
        matmul(self.cout, self.patch_len(), n, weight, false, &cols, false, &mut out.data, true);
        (out, cols)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    #[allow(clippy::too_many_arguments)]
    pub fn backward<T: Real>(
        &self,
        weight: &[T],
        cols: &[T],
        in_hw: (usize, usize),
        dout: &Tensor3<T>,
        dweight: &mut [T],
        dbias: &mut [T],
        want_input_grad: bool,
    ) -> Option<Tensor3<T>> {
        let (ho, wo) = (dout.height, dout.width);
        let n = ho * wo;
        matmul(self.cout, n, self.patch_len(), &dout.data, false, cols, true, dweight, true);
        for (co, db) in dbias.iter_mut().enumerate() {
            *db = *db + dout.plane(co).iter().fold(T::zero(), |a, &b| a + b);
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![T::zero(); self.patch_len() * n];
        matmul(self.patch_len(), self.cout, n, weight, true, &dout.data, false, &mut dcols, false);
        Some(self.col2im(&dcols, in_hw.0, in_hw.1, ho, wo))
    }
}

/// 2×2 transposed convolution with stride 2 (exact ×2 upsampling).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Deconv {
    pub cin: usize,
    pub cout: usize,
}

impl Deconv {
    pub fn forward<T: Real>(&self, weight: &[T], bias: &[T], x: &Tensor3<T>) -> Tensor3<T> {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let rows = self.cout * 4;
        let mut y = vec![T::zero(); rows * hw];
        matmul(rows, self.cin, hw, weight, true, &x.data, false, &mut y, false);
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = Tensor3::zeros(self.cout, ho, wo);
        for co in 0..self.cout {
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let src = &y[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                for iy in 0..h {
                    let row = ((co * ho) + 2 * iy + dy) * wo;
                    for ix in 0..w {
                        out.data[row + 2 * ix + dx] = src[iy * w + ix] + bias[co];
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        weight: &[T],
        x: &Tensor3<T>,
        dout: &Tensor3<T>,
        dweight: &mut [T],
        dbias: &mut [T],
    ) -> Tensor3<T> {
        let (h, w) = (x.height, x.width);
        let hw = h * w;
        let rows = self.cout * 4;
        let (ho, wo) = (2 * h, 2 * w);
        let mut g = vec![T::zero(); rows * hw];
        for co in 0..self.cout {
            for q in 0..4 {
                let (dy, dx) = (q / 2, q % 2);
                let dst = &mut g[(co * 4 + q) * hw..(co * 4 + q + 1) * hw];
                for iy in 0..h {
                    let row = ((co * ho) + 2 * iy + dy) * wo;
                    for ix in 0..w {
                        dst[iy * w + ix] = dout.data[row + 2 * ix + dx];
                    }
                }
            }
            dbias[co] = dbias[co] + dout.plane(co).iter().fold(T::zero(), |a, &b| a + b);
        }
        matmul(self.cin, hw, rows, &x.data, false, &g, true, dweight, true);
        let mut dx = Tensor3::zeros(self.cin, h, w);
        matmul(self.cin, rows, hw, weight, false, &g, false, &mut dx.data, false);
        dx
    }
}

/// Zeroes `grad` wherever the ReLU output `post` was clamped.
pub(crate) fn relu_backward<T: Real>(post: &Tensor3<T>, grad: &mut Tensor3<T>) {
    for (g, &p) in grad.data.iter_mut().zip(&post.data) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct convolution, written independently of the im2col path.
    fn direct_conv(conv: &Conv, w: &[f64], b: &[f64], x: &Tensor3<f64>) -> Tensor3<f64> {
        let (ho, wo) = conv.out_size(x.height, x.width);
        let p = conv.pad() as isize;
        let k = conv.kernel;
        let mut out = Tensor3::zeros(conv.cout, ho, wo);
        for co in 0..conv.cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..conv.cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - p;
                                let ix = (ox * conv.stride + kx) as isize - p;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    acc += w[((co * conv.cin + ci) * k + ky) * k + kx]
                                        * x.at(ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out.data[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + 1.0) * scale).sin()).collect()
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        for &(cin, cout, k, s, h, w) in &[(2, 3, 3, 1, 5, 4), (3, 2, 3, 2, 6, 7), (2, 4, 1, 2, 5, 5), (3, 3, 1, 1, 4, 4)] {
            let conv = Conv { cin, cout, kernel: k, stride: s };
            let wt = seq(cout * cin * k * k, 0.7);
            let b = seq(cout, 1.3);
            let x = Tensor3::from_vec(cin, h, w, seq(cin * h * w, 0.37));
            let (got, _) = conv.forward(&wt, &b, &x);
            let want = direct_conv(&conv, &wt, &b, &x);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_places_each_input_in_a_2x2_block() {
        let d = Deconv { cin: 1, cout: 1 };
        let w = [1.0, 2.0, 3.0, 4.0];
        let x = Tensor3::from_vec(1, 1, 2, vec![1.0, 10.0]);
        let out = d.forward(&w, &[0.5], &x);
        assert_eq!(out.shape(), [1, 2, 4]);
        assert_eq!(out.data, vec![1.5, 2.5, 10.5, 20.5, 3.5, 4.5, 30.5, 40.5]);
    }
}
