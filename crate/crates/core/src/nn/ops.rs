//! Primitive layers with hand-written backward passes.
//!
//! Everything works on one sample at a time; feature maps are channel-major.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::real::{gemm, Mat};
use crate::{FeatureMap, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Zero,
    Replicate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Square kernel size, 1 or odd.
    pub kernel: usize,
    pub padding: Padding,
}

impl ConvSpec {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Unfolds `x` into a `[C*k*k, H*W]` matrix ("same" output size).
pub fn im2col<T: Real>(x: &FeatureMap<T>, k: usize, padding: Padding) -> Vec<T> {
    let (c, h, w) = x.shape();
    let n = h * w;
    if k == 1 {
        return x.data.clone();
    }
    let p = (k / 2) as isize;
    let mut col = vec![T::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = x.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * n..][..n];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    let dst = &mut row[oy * w..][..w];
                    match padding {
                        Padding::Zero => {
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..][..w];
                            let lo = (-dx).max(0) as usize;
                            let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + dx) as usize;
                                dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        }
                        Padding::Replicate => {
                            let src = &plane[clamp_index(iy, h) * w..][..w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                *d = src[clamp_index(ox as isize + dx, w)];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds a `[C*k*k, H*W]` matrix back, summing
/// overlapping contributions.
pub fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize, padding: Padding) -> FeatureMap<T> {
    let n = h * w;
    if k == 1 {
        return FeatureMap { channels: c, height: h, width: w, data: col[..c * n].to_vec() };
    }
    let p = (k / 2) as isize;
    let mut out = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let plane = out.plane_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * n..][..n];
                let dy = ky as isize - p;
                let dx = kx as isize - p;
                for oy in 0..h {
                    let iy = oy as isize + dy;
                    let src = &row[oy * w..][..w];
                    match padding {
                        Padding::Zero => {
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst = &mut plane[iy as usize * w..][..w];
                            let lo = (-dx).max(0) as usize;
                            let hi = (w as isize - dx).min(w as isize).max(0) as usize;
                            for ox in lo..hi {
                                dst[(ox as isize + dx) as usize] += src[ox];
                            }
                        }
                        Padding::Replicate => {
                            let base = clamp_index(iy, h) * w;
                            for (ox, &s) in src.iter().enumerate() {
                                plane[base + clamp_index(ox as isize + dx, w)] += s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Convolution with "same" output size. Returns the output and the unfolded
/// input needed by [`conv_backward`].
pub fn conv_forward<T: Real>(weight: &[T], bias: &[T], x: &FeatureMap<T>, spec: &ConvSpec) -> (FeatureMap<T>, Vec<T>) {
    debug_assert_eq!(x.channels, spec.in_channels);
    let n = x.plane_len();
    let kk = spec.patch_len();
    let col = im2col(x, spec.kernel, spec.padding);
    let mut y = FeatureMap::zeros(spec.out_channels, x.height, x.width);
    gemm(spec.out_channels, kk, n, Mat::rm(weight, kk), Mat::rm(&col, n), T::zero(), &mut y.data);
    for (o, &b) in bias.iter().enumerate() {
        for v in y.plane_mut(o) {
            *v += b;
        }
    }
    (y, col)
}

/// Accumulates weight and bias gradients; returns the input gradient when
/// `need_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Real>(
    weight: &[T],
    col: &[T],
    dy: &FeatureMap<T>,
    spec: &ConvSpec,
    dweight: &mut [T],
    dbias: &mut [T],
    need_input: bool,
) -> Option<FeatureMap<T>> {
    let n = dy.plane_len();
    let kk = spec.patch_len();
    gemm(spec.out_channels, n, kk, Mat::rm(&dy.data, n), Mat::rm_t(col, n), T::one(), dweight);
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += sum(dy.plane(o));
    }
    if !need_input {
        return None;
    }
    let mut dcol = vec![T::zero(); kk * n];
    gemm(kk, spec.out_channels, n, Mat::rm_t(weight, kk), Mat::rm(&dy.data, n), T::zero(), &mut dcol);
    Some(col2im(&dcol, spec.in_channels, dy.height, dy.width, spec.kernel, spec.padding))
}

/// Sum with 64-bit accumulation.
pub fn sum<T: Real>(xs: &[T]) -> T {
    T::of(xs.iter().map(|v| v.as_f64()).sum::<f64>())
}

pub const NORM_EPS: f64 = 1e-5;

/// Parameter-free group normalization. Returns the normalized map and the
/// reciprocal standard deviation of each group.
pub fn normalize<T: Real>(x: &FeatureMap<T>, groups: usize) -> (FeatureMap<T>, Vec<T>) {
    let per = x.channels / groups * x.plane_len();
    let mut out = x.clone();
    let mut rstd = Vec::with_capacity(groups);
    for g in 0..groups {
        let chunk = &mut out.data[g * per..(g + 1) * per];
        let mean = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / per as f64;
        let r = 1.0 / (var + NORM_EPS).sqrt();
        for v in chunk.iter_mut() {
            *v = T::of((v.as_f64() - mean) * r);
        }
        rstd.push(T::of(r));
    }
    (out, rstd)
}

/// Input gradient of [`normalize`] given the gradient w.r.t. its output.
pub fn normalize_backward<T: Real>(xhat: &FeatureMap<T>, rstd: &[T], dxhat: &FeatureMap<T>) -> FeatureMap<T> {
    let groups = rstd.len();
    let per = xhat.channels / groups * xhat.plane_len();
    let mut dx = FeatureMap::zeros(xhat.channels, xhat.height, xhat.width);
    for (g, rs) in rstd.iter().enumerate() {
        let r = g * per..(g + 1) * per;
        let xh = &xhat.data[r.clone()];
        let dh = &dxhat.data[r.clone()];
        let mean_d = dh.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64;
        let mean_dx = dh.iter().zip(xh).map(|(d, x)| d.as_f64() * x.as_f64()).sum::<f64>() / per as f64;
        let rs = rs.as_f64();
        for ((o, &d), &x) in dx.data[r].iter_mut().zip(dh).zip(xh) {
            *o = T::of(rs * (d.as_f64() - mean_d - x.as_f64() * mean_dx));
        }
    }
    dx
}

/// Per-channel affine `y = xhat * gain + bias`.
pub fn affine<T: Real>(xhat: &FeatureMap<T>, gain: &[T], bias: &[T]) -> FeatureMap<T> {
    let mut y = xhat.clone();
    for c in 0..y.channels {
        let (g, b) = (gain[c], bias[c]);
        for v in y.plane_mut(c) {
            *v = *v * g + b;
        }
    }
    y
}

/// Backward of [`affine`]: accumulates parameter gradients, returns `dxhat`.
pub fn affine_backward<T: Real>(
    xhat: &FeatureMap<T>,
    gain: &[T],
    dy: &FeatureMap<T>,
    dgain: &mut [T],
    dbias: &mut [T],
) -> FeatureMap<T> {
    let mut dx = dy.clone();
    for c in 0..dy.channels {
        let dyp = dy.plane(c);
        let xp = xhat.plane(c);
        dgain[c] += T::of(dyp.iter().zip(xp).map(|(d, x)| d.as_f64() * x.as_f64()).sum::<f64>());
        dbias[c] += sum(dyp);
        let g = gain[c];
        for v in dx.plane_mut(c) {
            *v *= g;
        }
    }
    dx
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub fn silu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

/// `dy * d silu(x) / dx`.
pub fn silu_backward<T: Real>(x: &[T], dy: &[T]) -> Vec<T> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * (s + v * s * (T::one() - s))
        })
        .collect()
}

pub fn silu_map<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap { data: silu(&x.data), ..*x }
}

pub fn silu_map_backward<T: Real>(x: &FeatureMap<T>, dy: &FeatureMap<T>) -> FeatureMap<T> {
    FeatureMap { data: silu_backward(&x.data, &dy.data), ..*x }
}

/// Dense layer `y = W x + b`, `W` row-major `[out, in]`.
pub fn linear<T: Real>(weight: &[T], bias: &[T], x: &[T]) -> Vec<T> {
    let mut y = bias.to_vec();
    gemm(bias.len(), x.len(), 1, Mat::rm(weight, x.len()), Mat::rm(x, 1), T::one(), &mut y);
    y
}

/// Accumulates dense-layer gradients and returns `dx`.
pub fn linear_backward<T: Real>(weight: &[T], x: &[T], dy: &[T], dweight: &mut [T], dbias: &mut [T]) -> Vec<T> {
    let (out, inp) = (dy.len(), x.len());
    gemm(out, 1, inp, Mat::rm(dy, 1), Mat::rm(x, inp), T::one(), dweight);
    for (b, &d) in dbias.iter_mut().zip(dy) {
        *b += d;
    }
    let mut dx = vec![T::zero(); inp];
    gemm(inp, out, 1, Mat::rm_t(weight, inp), Mat::rm(dy, 1), T::zero(), &mut dx);
    dx
}

/// 2x2 average pooling.
pub fn avg_pool2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = (x.channels, x.height / 2, x.width / 2);
    let quarter = T::of(0.25);
    let mut y = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let src = x.plane(ci);
        let sw = x.width;
        for oy in 0..h {
            for ox in 0..w {
                let i = 2 * oy * sw + 2 * ox;
                y.data[(ci * h + oy) * w + ox] = (src[i] + src[i + 1] + src[i + sw] + src[i + sw + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Real>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = upsample2(dy);
    for v in &mut dx.data {
        *v *= T::of(0.25);
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = (x.channels, x.height * 2, x.width * 2);
    let mut y = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        for oy in 0..h {
            for ox in 0..w {
                y.data[(ci * h + oy) * w + ox] = x.data[(ci * x.height + oy / 2) * x.width + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    let (c, h, w) = (dy.channels, dy.height / 2, dy.width / 2);
    let mut dx = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        for iy in 0..dy.height {
            for ix in 0..dy.width {
                dx.data[(ci * h + iy / 2) * w + ix / 2] += dy.data[(ci * dy.height + iy) * dy.width + ix];
            }
        }
    }
    dx
}

/// Nearest-neighbour resize (source index `floor(i * src / dst)`).
pub fn resize_nearest<T: Real>(x: &FeatureMap<T>, height: usize, width: usize) -> FeatureMap<T> {
    if x.height == height && x.width == width {
        return x.clone();
    }
    let mut y = FeatureMap::zeros(x.channels, height, width);
    for c in 0..x.channels {
        for oy in 0..height {
            let sy = oy * x.height / height;
            for ox in 0..width {
                let sx = ox * x.width / width;
                y.data[(c * height + oy) * width + ox] = x.data[(c * x.height + sy) * x.width + sx];
            }
        }
    }
    y
}

/// Channel concatenation `[a; b]`.
pub fn concat<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    debug_assert_eq!((a.height, a.width), (b.height, b.width));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap { channels: a.channels + b.channels, height: a.height, width: a.width, data }
}

/// Splits a concatenated gradient back into its `a` and `b` parts.
pub fn split<T: Real>(d: &FeatureMap<T>, a_channels: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let cut = a_channels * d.plane_len();
    let a = FeatureMap { channels: a_channels, height: d.height, width: d.width, data: d.data[..cut].to_vec() };
    let b = FeatureMap {
        channels: d.channels - a_channels,
        height: d.height,
        width: d.width,
        data: d.data[cut..].to_vec(),
    };
    (a, b)
}

pub fn add_assign<T: Real>(a: &mut FeatureMap<T>, b: &FeatureMap<T>) {
    debug_assert_eq!(a.shape(), b.shape());
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
}

/// Row-wise softmax of an `[rows, cols]` matrix, in place.
pub fn softmax_rows<T: Real>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += v.as_f64();
        }
        let inv = T::of(1.0 / total);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm(c: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> FeatureMap<f64> {
        FeatureMap { channels: c, height: h, width: w, data: (0..c * h * w).map(f).collect() }
    }

    fn naive_conv(w: &[f64], b: &[f64], x: &FeatureMap<f64>, spec: &ConvSpec) -> FeatureMap<f64> {
        let k = spec.kernel as isize;
        let p = k / 2;
        let mut y = FeatureMap::zeros(spec.out_channels, x.height, x.width);
        for o in 0..spec.out_channels {
            for oy in 0..x.height as isize {
                for ox in 0..x.width as isize {
                    let mut acc = b[o];
                    for c in 0..spec.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let (iy, ix) = (oy + ky - p, ox + kx - p);
                                let v = match spec.padding {
                                    Padding::Zero => {
                                        if iy < 0 || ix < 0 || iy >= x.height as isize || ix >= x.width as isize {
                                            continue;
                                        }
                                        x.at(c, iy as usize, ix as usize)
                                    }
                                    Padding::Replicate => {
                                        x.at(c, clamp_index(iy, x.height), clamp_index(ix, x.width))
                                    }
                                };
                                acc += w[((o * spec.in_channels + c) * spec.kernel + ky as usize) * spec.kernel
                                    + kx as usize]
                                    * v;
                            }
                        }
                    }
                    y.data[(o * x.height + oy as usize) * x.width + ox as usize] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_sum() {
        for padding in [Padding::Zero, Padding::Replicate] {
            for kernel in [1, 3] {
                let spec = ConvSpec { in_channels: 2, out_channels: 3, kernel, padding };
                let x = fm(2, 4, 5, |i| ((i * 7) % 11) as f64 - 5.0);
                let w: Vec<f64> = (0..spec.out_channels * spec.patch_len()).map(|i| ((i * 3) % 7) as f64 * 0.1 - 0.3).collect();
                let b = vec![0.1, -0.2, 0.3];
                let (y, _) = conv_forward(&w, &b, &x, &spec);
                let expect = naive_conv(&w, &b, &x, &spec);
                for (a, e) in y.data.iter().zip(&expect.data) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        for padding in [Padding::Zero, Padding::Replicate] {
            let x = fm(2, 3, 4, |i| (i as f64 * 0.37).sin());
            let col = im2col(&x, 3, padding);
            let c: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.11).cos()).collect();
            let lhs: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
            let back = col2im(&c, 2, 3, 4, 3, padding);
            let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn normalize_constant_and_hand_case() {
        let (y, _) = normalize(&fm(2, 2, 2, |_| 3.0), 1);
        assert!(y.data.iter().all(|&v| v == 0.0));
        let (y, _) = normalize(&FeatureMap { channels: 1, height: 1, width: 2, data: vec![1.0, 3.0] }, 1);
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data[0] + expect).abs() < 1e-12 && (y.data[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn normalize_gives_zero_mean_unit_variance_per_group() {
        let x = fm(4, 3, 3, |i| ((i * 13) % 17) as f64 * 0.7 - 2.0);
        let (y, _) = normalize(&x, 2);
        for g in y.data.chunks(18) {
            let m = g.iter().sum::<f64>() / 18.0;
            let v = g.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-4 && (v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = vec![1.0f64, 2.0, 3.0, -1000.0, 0.0, 1000.0];
        softmax_rows(&mut m, 3);
        assert!((m[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((m[3..].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let x = fm(1, 4, 4, |i| i as f64);
        let d = fm(1, 2, 2, |i| (i + 1) as f64);
        let lhs: f64 = avg_pool2(&x).data.iter().zip(&d.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&avg_pool2_backward(&d).data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        let u = upsample2(&d);
        assert_eq!(u.at(0, 3, 3), 4.0);
        assert_eq!(upsample2_backward(&u).data, vec![4.0, 8.0, 12.0, 16.0]);
    }
}
