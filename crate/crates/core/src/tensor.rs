//! Dense `N×C×H×W` tensors and the handful of layer primitives the
//! segmentation network is built from. Every forward primitive has a matching
//! backward that takes the upstream gradient and returns the input gradient.

use crate::error::{Error, Result};
use crate::scalar::{matmul, Op, Scalar};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Result<Self> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::shape(format!(
                "tensor of shape {shape:?} needs {want} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let hw = self.shape[2] * self.shape[3];
        let start = (n * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Unfolds one `C×H×W` sample into a `(C·k·k)×(H·W)` patch matrix for a
/// stride-1 convolution with zero padding `k/2`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dx = kx as isize - pad;
                let dy = ky as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x_lo].fill(T::zero());
                    let sx_lo = (x_lo as isize + dx) as usize;
                    out[x_lo..x_hi].copy_from_slice(&src[sx_lo..sx_lo + (x_hi - x_lo)]);
                    out[x_hi..].fill(T::zero());
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the sample.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = (k / 2) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dxo = kx as isize - pad;
                let dyo = ky as isize - pad;
                let x_lo = (-dxo).max(0) as usize;
                let x_hi = (w as isize - dxo).min(w as isize).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dyo;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sx_lo = (x_lo as isize + dxo) as usize;
                    let dst = &mut plane[sy as usize * w + sx_lo..sy as usize * w + sx_lo + (x_hi - x_lo)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x_lo..y * w + x_hi]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Stride-1 "same" convolution. `weight` is `out×in×k×k`, `bias` has `out` entries.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize, k: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let hw = h * w;
    let kk = c * k * k;
    debug_assert_eq!(weight.len(), out_ch * kk);
    debug_assert_eq!(bias.len(), out_ch);
    let mut y = Tensor::zeros([n, out_ch, h, w]);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for s in 0..n {
        let out = y.sample_mut(s);
        for (o, b) in bias.iter().enumerate() {
            out[o * hw..(o + 1) * hw].fill(*b);
        }
        let patches: &[T] = if k == 1 {
            x.sample(s)
        } else {
            im2col(x.sample(s), c, h, w, k, &mut cols);
            &cols
        };
        matmul(out_ch, kk, hw, weight, Op::N, patches, Op::N, out, true);
    }
    y
}

/// Backward of [`conv2d`]. Accumulates into `dweight`/`dbias` and returns the
/// input gradient when `need_input_grad` is set.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    weight: &[T],
    k: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let out_ch = dy.channels();
    let hw = h * w;
    let kk = c * k * k;
    let mut dx = need_input_grad.then(|| Tensor::zeros([n, c, h, w]));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = if need_input_grad && k != 1 { vec![T::zero(); kk * hw] } else { Vec::new() };
    for s in 0..n {
        let g = dy.sample(s);
        for (o, db) in dbias.iter_mut().enumerate() {
            *db += g[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
        }
        let patches: &[T] = if k == 1 {
            x.sample(s)
        } else {
            im2col(x.sample(s), c, h, w, k, &mut cols);
            &cols
        };
        matmul(out_ch, hw, kk, g, Op::N, patches, Op::T, dweight, true);
        if let Some(dx) = dx.as_mut() {
            if k == 1 {
                matmul(kk, out_ch, hw, weight, Op::T, g, Op::N, dx.sample_mut(s), false);
            } else {
                matmul(kk, out_ch, hw, weight, Op::T, g, Op::N, &mut dcols, false);
                col2im(&dcols, c, h, w, k, dx.sample_mut(s));
            }
        }
    }
    dx
}

pub fn relu_inplace<T: Scalar>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the ReLU output `y` (gradient passes where `y > 0`).
pub fn relu_backward_inplace<T: Scalar>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, v) in dy.data_mut().iter_mut().zip(y.data()) {
        if *v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2×2 average pooling with stride 2.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::of(0.25);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = y.plane_mut(s, ch);
            for oy in 0..oh {
                let r0 = &src[2 * oy * w..];
                let r1 = &src[(2 * oy + 1) * w..];
                for ox in 0..ow {
                    dst[oy * ow + ox] = (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh * 2, ow * 2);
    let quarter = T::of(0.25);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        for ch in 0..c {
            let src = dy.plane(s, ch);
            let dst = dx.plane_mut(s, ch);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[(y / 2) * ow + x / 2] * quarter;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (oh, ow) = (h * 2, w * 2);
    let mut y = Tensor::zeros([n, c, oh, ow]);
    for s in 0..n {
        for ch in 0..c {
            let src = x.plane(s, ch);
            let dst = y.plane_mut(s, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[oy * ow + ox] = src[(oy / 2) * w + ox / 2];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, oh, ow] = dy.shape();
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        for ch in 0..c {
            let src = dy.plane(s, ch);
            let dst = dx.plane_mut(s, ch);
            for oy in 0..oh {
                for ox in 0..ow {
                    dst[(oy / 2) * w + ox / 2] += src[oy * ow + ox];
                }
            }
        }
    }
    dx
}

/// Concatenates along channels: `[a | b]`.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, ca, h, w] = a.shape();
    let cb = b.channels();
    assert_eq!([n, h, w], [b.batch(), b.height(), b.width()], "concat shape mismatch");
    let mut y = Tensor::zeros([n, ca + cb, h, w]);
    let la = ca * h * w;
    for s in 0..n {
        let dst = y.sample_mut(s);
        dst[..la].copy_from_slice(a.sample(s));
        dst[la..].copy_from_slice(b.sample(s));
    }
    y
}

/// Splits a channel-concatenated gradient back into its `a` and `b` parts.
pub fn split_channels<T: Scalar>(d: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let [n, c, h, w] = d.shape();
    let mut da = Tensor::zeros([n, ca, h, w]);
    let mut db = Tensor::zeros([n, c - ca, h, w]);
    let la = ca * h * w;
    for s in 0..n {
        let src = d.sample(s);
        da.sample_mut(s).copy_from_slice(&src[..la]);
        db.sample_mut(s).copy_from_slice(&src[la..]);
    }
    (da, db)
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = logits.shape();
    let hw = h * w;
    let mut p = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        let src = logits.sample(s);
        let dst = p.sample_mut(s);
        for i in 0..hw {
            let mut m = T::neg_infinity();
            for ch in 0..c {
                m = m.max(src[ch * hw + i]);
            }
            let mut z = T::zero();
            for ch in 0..c {
                let e = (src[ch * hw + i] - m).exp();
                dst[ch * hw + i] = e;
                z += e;
            }
            for ch in 0..c {
                dst[ch * hw + i] /= z;
            }
        }
    }
    p
}

/// Maps a gradient with respect to probabilities onto the logits:
/// `dz_c = p_c (dp_c − Σ_j p_j dp_j)`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = probs.shape();
    let hw = h * w;
    let mut dz = Tensor::zeros([n, c, h, w]);
    for s in 0..n {
        let p = probs.sample(s);
        let g = dprobs.sample(s);
        let out = dz.sample_mut(s);
        for i in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                dot += p[ch * hw + i] * g[ch * hw + i];
            }
            for ch in 0..c {
                out[ch * hw + i] = p[ch * hw + i] * (g[ch * hw + i] - dot);
            }
        }
    }
    dz
}

/// Multiplies every `(sample, channel)` plane by its scale (0 for dropped
/// channels, `1/(1−rate)` for kept ones).
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, scales: &[T]) -> Tensor<T> {
    let [n, c, _, _] = x.shape();
    assert_eq!(scales.len(), n * c, "one scale per sample channel");
    let mut y = x.clone();
    for s in 0..n {
        for ch in 0..c {
            let k = scales[s * c + ch];
            for v in y.plane_mut(s, ch) {
                *v *= k;
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: [usize; 4], f: f64) -> Tensor<f64> {
        let len = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64) * f).sin()).collect()).unwrap()
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    fn conv_direct(x: &Tensor<f64>, w: &[f64], b: &[f64], out_ch: usize, k: usize) -> Tensor<f64> {
        let [n, c, h, wd] = x.shape();
        let pad = (k / 2) as isize;
        let mut y = Tensor::zeros([n, out_ch, h, wd]);
        for s in 0..n {
            for o in 0..out_ch {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut acc = b[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = yy as isize + ky as isize - pad;
                                    let sx = xx as isize + kx as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += w[((o * c + ci) * k + ky) * k + kx]
                                        * x.plane(s, ci)[sy as usize * wd + sx as usize];
                                }
                            }
                        }
                        y.plane_mut(s, o)[yy * wd + xx] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = ramp([2, 3, 5, 6], 0.7);
        for k in [1, 3] {
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| (i as f64 * 0.3).cos()).collect();
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let got = conv2d(&x, &w, &b, 4, k);
            let want = conv_direct(&x, &w, &b, 4, k);
            for (a, e) in got.data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12, "k={k}");
            }
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), dy> is linear in x and w; its gradients are exact.
        let x = ramp([2, 3, 4, 5], 0.41);
        let dy = ramp([2, 2, 4, 5], 1.3);
        for k in [1, 3] {
            let w: Vec<f64> = (0..2 * 3 * k * k).map(|i| (i as f64 * 0.17).sin()).collect();
            let b = vec![0.0; 2];
            let mut dw = vec![0.0; w.len()];
            let mut db = vec![0.0; 2];
            let dx = conv2d_backward(&x, &dy, &w, k, &mut dw, &mut db, true).unwrap();
            // input gradient: <conv(e_i), dy> for each basis vector e_i
            for i in 0..x.data().len() {
                let mut e = Tensor::zeros(x.shape());
                e.data_mut()[i] = 1.0;
                let want = dot(&conv2d(&e, &w, &b, 2, k), &dy);
                assert!((dx.data()[i] - want).abs() < 1e-12);
            }
            for i in 0..w.len() {
                let mut we = vec![0.0; w.len()];
                we[i] = 1.0;
                let want = dot(&conv2d(&x, &we, &b, 2, k), &dy);
                assert!((dw[i] - want).abs() < 1e-12);
            }
            let sums: Vec<f64> = (0..2).map(|o| (0..2).map(|s| dy.plane(s, o).iter().sum::<f64>()).sum()).collect();
            assert!((db[0] - sums[0]).abs() < 1e-12 && (db[1] - sums[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_and_upsample_backwards_are_adjoint() {
        let x = ramp([1, 2, 4, 6], 0.9);
        let g_small = ramp([1, 2, 2, 3], 0.5);
        assert!((dot(&avg_pool2(&x), &g_small) - dot(&x, &avg_pool2_backward(&g_small))).abs() < 1e-12);
        let g_big = ramp([1, 2, 8, 12], 0.2);
        assert!((dot(&upsample2(&x), &g_big) - dot(&x, &upsample2_backward(&g_big))).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = ramp([2, 4, 3, 3], 3.1);
        let p = softmax_channels(&z);
        for s in 0..2 {
            for i in 0..9 {
                let sum: f64 = (0..4).map(|c| p.plane(s, c)[i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = ramp([2, 2, 3, 3], 0.3);
        let b = ramp([2, 3, 3, 3], 0.8);
        let (da, db) = split_channels(&concat_channels(&a, &b), 2);
        assert_eq!(da, a);
        assert_eq!(db, b);
    }
}
