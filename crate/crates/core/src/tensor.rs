//! Dense map-stack arithmetic.
//!
//! Everything the network needs is here: valid/zero-padded 2-D correlation
//! over banks of kernels, element-wise weighting, the scaled hyperbolic
//! tangent, and the exact adjoint of each. Convolution follows the
//! correlation convention (no kernel flip):
//!
//! ```text
//! out[p][y][x] = sum_q sum_{i,j} k[p][q][i][j] * in_q[y + i - top][x + j - left]
//! ```
//!
//! with out-of-range input pixels read as zero.

use serde::{Deserialize, Serialize};

use crate::error::{topology, Error, Result};

/// Amplitude of the scaled hyperbolic tangent.
pub const TANH_AMPLITUDE: f64 = 1.7159;
/// Input gain of the scaled hyperbolic tangent.
pub const TANH_GAIN: f64 = 2.0 / 3.0;

/// A stack of equally sized 2-D maps, map-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MapStack {
    maps: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// A single frame is a stack with one map.
pub type Frame = MapStack;

impl MapStack {
    pub fn zeros(maps: usize, height: usize, width: usize) -> Self {
        Self { maps, height, width, data: vec![0.0; maps * height * width] }
    }

    pub fn filled(maps: usize, height: usize, width: usize, value: f64) -> Self {
        Self { maps, height, width, data: vec![value; maps * height * width] }
    }

    pub fn from_vec(maps: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return topology(format!("map size {height}x{width} must be positive"));
        }
        if data.len() != maps * height * width {
            return topology(format!(
                "map stack {maps}x{height}x{width} needs {} values, got {}",
                maps * height * width,
                data.len()
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("map stack contains non-finite values".into()));
        }
        Ok(Self { maps, height, width, data })
    }

    pub fn maps(&self) -> usize {
        self.maps
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn map_len(&self) -> usize {
        self.height * self.width
    }
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.maps, self.height, self.width)
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, p: usize) -> &[f64] {
        let n = self.map_len();
        &self.data[p * n..(p + 1) * n]
    }

    pub fn map_mut(&mut self, p: usize) -> &mut [f64] {
        let n = self.map_len();
        &mut self.data[p * n..(p + 1) * n]
    }

    pub fn get(&self, p: usize, y: usize, x: usize) -> f64 {
        self.data[(p * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, p: usize, y: usize, x: usize, v: f64) {
        self.data[(p * self.height + y) * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &MapStack) -> bool {
        self.dims() == other.dims()
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &MapStack, scale: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn dot(&self, other: &MapStack) -> f64 {
        debug_assert!(self.same_shape(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Element-wise scaled tanh of every value.
    pub fn activated(&self) -> MapStack {
        MapStack {
            maps: self.maps,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| scaled_tanh(v)).collect(),
        }
    }
}

/// `P x Q` bank of `kh x kw` kernels, indexed `(p, q, i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    out_maps: usize,
    in_maps: usize,
    kh: usize,
    kw: usize,
    data: Vec<f64>,
}

impl KernelBank {
    pub fn zeros(out_maps: usize, in_maps: usize, kh: usize, kw: usize) -> Self {
        Self { out_maps, in_maps, kh, kw, data: vec![0.0; out_maps * in_maps * kh * kw] }
    }

    pub fn from_vec(out_maps: usize, in_maps: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if kh == 0 || kw == 0 {
            return topology(format!("kernel size {kh}x{kw} must be positive"));
        }
        if data.len() != out_maps * in_maps * kh * kw {
            return topology(format!(
                "kernel bank {out_maps}x{in_maps}x{kh}x{kw} needs {} values, got {}",
                out_maps * in_maps * kh * kw,
                data.len()
            ));
        }
        Ok(Self { out_maps, in_maps, kh, kw, data })
    }

    pub fn out_maps(&self) -> usize {
        self.out_maps
    }
    pub fn in_maps(&self) -> usize {
        self.in_maps
    }
    pub fn kernel_size(&self) -> (usize, usize) {
        (self.kh, self.kw)
    }
    pub fn dims(&self) -> [usize; 4] {
        [self.out_maps, self.in_maps, self.kh, self.kw]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn kernel(&self, p: usize, q: usize) -> &[f64] {
        let n = self.kh * self.kw;
        let off = (p * self.in_maps + q) * n;
        &self.data[off..off + n]
    }

    fn kernel_mut(&mut self, p: usize, q: usize) -> &mut [f64] {
        let n = self.kh * self.kw;
        let off = (p * self.in_maps + q) * n;
        &mut self.data[off..off + n]
    }
}

/// Element-wise weight maps, one `height x width` map per `(out, in)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    out_maps: usize,
    in_maps: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl WeightBank {
    pub fn zeros(out_maps: usize, in_maps: usize, height: usize, width: usize) -> Self {
        Self { out_maps, in_maps, height, width, data: vec![0.0; out_maps * in_maps * height * width] }
    }

    pub fn from_vec(out_maps: usize, in_maps: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != out_maps * in_maps * height * width {
            return topology(format!(
                "weight bank {out_maps}x{in_maps}x{height}x{width} needs {} values, got {}",
                out_maps * in_maps * height * width,
                data.len()
            ));
        }
        Ok(Self { out_maps, in_maps, height, width, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.out_maps, self.in_maps, self.height, self.width]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn weight(&self, m: usize, n: usize) -> &[f64] {
        let len = self.height * self.width;
        let off = (m * self.in_maps + n) * len;
        &self.data[off..off + len]
    }

    fn weight_mut(&mut self, m: usize, n: usize) -> &mut [f64] {
        let len = self.height * self.width;
        let off = (m * self.in_maps + n) * len;
        &mut self.data[off..off + len]
    }
}

/// Zero padding applied around a source map before a valid correlation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl PadSpec {
    pub fn is_zero(&self) -> bool {
        *self == PadSpec::default()
    }

    /// Output size of a correlation of a `src` map with a `k` kernel under this padding.
    pub fn output_size(&self, src: (usize, usize), k: (usize, usize)) -> Option<(usize, usize)> {
        let h = (src.0 + self.top + self.bottom + 1).checked_sub(k.0)?;
        let w = (src.1 + self.left + self.right + 1).checked_sub(k.1)?;
        (h > 0 && w > 0).then_some((h, w))
    }
}

/// Padding along one axis: `(before, after)`, remainder after.
pub fn resolve_padding_1d(src: usize, dst: usize, k: usize) -> Result<(usize, usize)> {
    if src == 0 || dst == 0 || k == 0 {
        return topology(format!("sizes must be positive (src={src}, dst={dst}, k={k})"));
    }
    let total = (dst + k - 1) as isize - src as isize;
    if total < 0 {
        return topology(format!(
            "source {src} with kernel {k} yields {} > target {dst}; needs negative padding",
            src + 1 - k
        ));
    }
    let total = total as usize;
    Ok((total / 2, total - total / 2))
}

/// Zero padding that makes a `k` correlation map `src` onto `dst`.
pub fn resolve_padding(src: (usize, usize), dst: (usize, usize), k: (usize, usize)) -> Result<PadSpec> {
    let (top, bottom) = resolve_padding_1d(src.0, dst.0, k.0)?;
    let (left, right) = resolve_padding_1d(src.1, dst.1, k.1)?;
    Ok(PadSpec { top, bottom, left, right })
}

/// Row/column ranges of the output touched by kernel tap `(i, j)`.
#[inline]
fn tap_range(out: usize, src: usize, pad_before: usize, tap: usize) -> (usize, usize) {
    let lo = pad_before.saturating_sub(tap);
    let hi = (src + pad_before).saturating_sub(tap).min(out);
    (lo, hi.max(lo))
}

fn check_conv(input: &MapStack, kernels: &KernelBank, pad: PadSpec) -> Result<(usize, usize)> {
    if input.maps() != kernels.in_maps() {
        return topology(format!(
            "convolution expects {} input maps, got {}",
            kernels.in_maps(),
            input.maps()
        ));
    }
    pad.output_size((input.height(), input.width()), kernels.kernel_size())
        .ok_or_else(|| Error::Topology("kernel larger than padded input".into()))
}

/// Sum over input maps of the zero-padded correlation with each kernel.
pub fn conv_bank(input: &MapStack, kernels: &KernelBank, pad: PadSpec) -> Result<MapStack> {
    let (h, w) = check_conv(input, kernels, pad)?;
    let mut out = MapStack::zeros(kernels.out_maps(), h, w);
    conv_bank_acc(input, kernels, pad, &mut out);
    Ok(out)
}

/// Accumulating form of [`conv_bank`]: `out += conv(input, kernels)`. Shapes are trusted.
pub fn conv_bank_acc(input: &MapStack, kernels: &KernelBank, pad: PadSpec, out: &mut MapStack) {
    let (kh, kw) = kernels.kernel_size();
    let (sh, sw) = (input.height(), input.width());
    let (oh, ow) = (out.height(), out.width());
    debug_assert_eq!(input.maps(), kernels.in_maps());
    debug_assert_eq!(out.maps(), kernels.out_maps());
    for p in 0..kernels.out_maps() {
        let out_p = out.map_mut(p);
        for q in 0..kernels.in_maps() {
            let in_q = input.map(q);
            let k = kernels.kernel(p, q);
            for i in 0..kh {
                let (y_lo, y_hi) = tap_range(oh, sh, pad.top, i);
                for j in 0..kw {
                    let wgt = k[i * kw + j];
                    let (x_lo, x_hi) = tap_range(ow, sw, pad.left, j);
                    let n = x_hi - x_lo;
                    if n == 0 {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let sy = y + i - pad.top;
                        let src = &in_q[sy * sw + x_lo + j - pad.left..][..n];
                        let dst = &mut out_p[y * ow + x_lo..][..n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
}

/// `grad_input += adjoint of conv w.r.t. its input`, applied to `grad_out`.
pub fn conv_adjoint_input_acc(grad_out: &MapStack, kernels: &KernelBank, pad: PadSpec, grad_input: &mut MapStack) {
    let (kh, kw) = kernels.kernel_size();
    let (sh, sw) = (grad_input.height(), grad_input.width());
    let (oh, ow) = (grad_out.height(), grad_out.width());
    for p in 0..kernels.out_maps() {
        let g_p = grad_out.map(p);
        for q in 0..kernels.in_maps() {
            let k = kernels.kernel(p, q);
            let gi_q = grad_input.map_mut(q);
            for i in 0..kh {
                let (y_lo, y_hi) = tap_range(oh, sh, pad.top, i);
                for j in 0..kw {
                    let wgt = k[i * kw + j];
                    let (x_lo, x_hi) = tap_range(ow, sw, pad.left, j);
                    let n = x_hi - x_lo;
                    if n == 0 {
                        continue;
                    }
                    for y in y_lo..y_hi {
                        let sy = y + i - pad.top;
                        let src = &g_p[y * ow + x_lo..][..n];
                        let dst = &mut gi_q[sy * sw + x_lo + j - pad.left..][..n];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
}

/// `grad_kernels += adjoint of conv w.r.t. its kernels`, applied to `grad_out`.
pub fn conv_adjoint_kernel_acc(grad_out: &MapStack, input: &MapStack, pad: PadSpec, grad_kernels: &mut KernelBank) {
    let (kh, kw) = grad_kernels.kernel_size();
    let (sh, sw) = (input.height(), input.width());
    let (oh, ow) = (grad_out.height(), grad_out.width());
    for p in 0..grad_kernels.out_maps() {
        let g_p = grad_out.map(p);
        for q in 0..grad_kernels.in_maps() {
            let in_q = input.map(q);
            let gk = grad_kernels.kernel_mut(p, q);
            for i in 0..kh {
                let (y_lo, y_hi) = tap_range(oh, sh, pad.top, i);
                for j in 0..kw {
                    let (x_lo, x_hi) = tap_range(ow, sw, pad.left, j);
                    let n = x_hi - x_lo;
                    if n == 0 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y_lo..y_hi {
                        let sy = y + i - pad.top;
                        let src = &in_q[sy * sw + x_lo + j - pad.left..][..n];
                        let g = &g_p[y * ow + x_lo..][..n];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    gk[i * kw + j] += acc;
                }
            }
        }
    }
}

/// Gradients of `<grad_out, conv_bank(input, kernels, pad)>` w.r.t. input and kernels.
///
/// Gradient falling on the zero padding is discarded.
pub fn conv_bank_adjoint(
    grad_out: &MapStack,
    input: &MapStack,
    kernels: &KernelBank,
    pad: PadSpec,
) -> Result<(MapStack, KernelBank)> {
    let (h, w) = check_conv(input, kernels, pad)?;
    if grad_out.dims() != (kernels.out_maps(), h, w) {
        return topology(format!(
            "adjoint expects gradient of shape {}x{h}x{w}, got {:?}",
            kernels.out_maps(),
            grad_out.dims()
        ));
    }
    let mut grad_input = MapStack::zeros(input.maps(), input.height(), input.width());
    let [p, q, kh, kw] = kernels.dims();
    let mut grad_kernels = KernelBank::zeros(p, q, kh, kw);
    conv_adjoint_input_acc(grad_out, kernels, pad, &mut grad_input);
    conv_adjoint_kernel_acc(grad_out, input, pad, &mut grad_kernels);
    Ok((grad_input, grad_kernels))
}

#[inline]
pub fn scaled_tanh(x: f64) -> f64 {
    TANH_AMPLITUDE * (TANH_GAIN * x).tanh()
}

#[inline]
pub fn scaled_tanh_prime(x: f64) -> f64 {
    let t = (TANH_GAIN * x).tanh();
    TANH_AMPLITUDE * TANH_GAIN * (1.0 - t * t)
}

/// Derivative expressed through the activation value `a = scaled_tanh(x)`.
#[inline]
pub fn scaled_tanh_prime_from_output(a: f64) -> f64 {
    let t = a / TANH_AMPLITUDE;
    TANH_AMPLITUDE * TANH_GAIN * (1.0 - t * t)
}

/// Element-wise product of two equally shaped stacks.
pub fn elementwise_mac(a: &MapStack, w: &MapStack) -> Result<MapStack> {
    if !a.same_shape(w) {
        return topology(format!("element-wise product of {:?} and {:?}", a.dims(), w.dims()));
    }
    let data = a.as_slice().iter().zip(w.as_slice()).map(|(x, y)| x * y).collect();
    Ok(MapStack { maps: a.maps, height: a.height, width: a.width, data })
}

/// Adjoint of [`elementwise_mac`]: `(grad_a, grad_w) = (g * w, g * a)`.
pub fn elementwise_mac_adjoint(g: &MapStack, a: &MapStack, w: &MapStack) -> Result<(MapStack, MapStack)> {
    if !(g.same_shape(a) && a.same_shape(w)) {
        return topology("element-wise adjoint shape mismatch");
    }
    Ok((elementwise_mac(g, w)?, elementwise_mac(g, a)?))
}

/// `out[m] += sum_n input[n] * weights[m][n]` element-wise.
pub fn weight_bank_acc(input: &MapStack, weights: &WeightBank, out: &mut MapStack) {
    debug_assert_eq!(weights.dims(), [out.maps(), input.maps(), input.height(), input.width()]);
    for m in 0..out.maps() {
        let o = out.map_mut(m);
        for n in 0..input.maps() {
            let w = weights.weight(m, n);
            for ((d, a), b) in o.iter_mut().zip(input.map(n)).zip(w) {
                *d += a * b;
            }
        }
    }
}

/// Input half of the adjoint of [`weight_bank_acc`].
pub fn weight_bank_adjoint_input_acc(grad_out: &MapStack, weights: &WeightBank, grad_input: &mut MapStack) {
    for m in 0..grad_out.maps() {
        let g = grad_out.map(m);
        for n in 0..grad_input.maps() {
            let w = weights.weight(m, n);
            for ((d, a), b) in grad_input.map_mut(n).iter_mut().zip(g).zip(w) {
                *d += a * b;
            }
        }
    }
}

/// Weight half of the adjoint of [`weight_bank_acc`].
pub fn weight_bank_adjoint_weight_acc(grad_out: &MapStack, input: &MapStack, grad_weights: &mut WeightBank) {
    for m in 0..grad_out.maps() {
        let g = grad_out.map(m);
        for n in 0..input.maps() {
            for ((d, a), b) in grad_weights.weight_mut(m, n).iter_mut().zip(g).zip(input.map(n)) {
                *d += a * b;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(rng: &mut ChaCha8Rng, m: usize, h: usize, w: usize) -> MapStack {
        let data = (0..m * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        MapStack::from_vec(m, h, w, data).unwrap()
    }

    fn random_bank(rng: &mut ChaCha8Rng, p: usize, q: usize, kh: usize, kw: usize) -> KernelBank {
        let data = (0..p * q * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        KernelBank::from_vec(p, q, kh, kw, data).unwrap()
    }

    /// Direct loop over every output pixel, reading padded input by bounds check.
    fn naive_conv(input: &MapStack, k: &KernelBank, pad: PadSpec) -> MapStack {
        let [p_n, q_n, kh, kw] = k.dims();
        let oh = input.height() + pad.top + pad.bottom + 1 - kh;
        let ow = input.width() + pad.left + pad.right + 1 - kw;
        let mut out = MapStack::zeros(p_n, oh, ow);
        for p in 0..p_n {
            for y in 0..oh {
                for x in 0..ow {
                    let mut s = 0.0;
                    for q in 0..q_n {
                        for i in 0..kh {
                            for j in 0..kw {
                                let sy = y as isize + i as isize - pad.top as isize;
                                let sx = x as isize + j as isize - pad.left as isize;
                                if sy >= 0 && sx >= 0 && (sy as usize) < input.height() && (sx as usize) < input.width() {
                                    s += k.kernel(p, q)[i * kw + j] * input.get(q, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    out.set(p, y, x, s);
                }
            }
        }
        out
    }

    #[test]
    fn padding_examples() {
        assert!(resolve_padding((36, 36), (32, 32), (5, 5)).unwrap().is_zero());
        let p = resolve_padding((26, 26), (32, 32), (7, 7)).unwrap();
        assert_eq!(p, PadSpec { top: 6, bottom: 6, left: 6, right: 6 });
        let p = resolve_padding((1, 1), (2, 2), (2, 2)).unwrap();
        assert_eq!(p, PadSpec { top: 1, bottom: 1, left: 1, right: 1 });
        // odd total: remainder goes bottom/right
        let p = resolve_padding((4, 4), (6, 6), (2, 2)).unwrap();
        assert_eq!(p, PadSpec { top: 1, bottom: 2, left: 1, right: 2 });
        assert!(matches!(resolve_padding((36, 36), (20, 20), (5, 5)), Err(Error::Topology(_))));
    }

    #[test]
    fn conv_identity_and_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_stack(&mut rng, 1, 5, 4);
        let k = KernelBank::from_vec(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(conv_bank(&x, &k, PadSpec::default()).unwrap(), x);

        let ones = MapStack::filled(1, 3, 3, 1.0);
        let k = KernelBank::from_vec(1, 1, 2, 2, vec![1.0; 4]).unwrap();
        let y = conv_bank(&ones, &k, PadSpec::default()).unwrap();
        assert_eq!(y.dims(), (1, 2, 2));
        assert!(y.as_slice().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_stack(&mut rng, 1, 36, 36);
        let k = random_bank(&mut rng, 10, 1, 5, 5);
        let y = conv_bank(&x, &k, PadSpec::default()).unwrap();
        assert_eq!(y.dims(), (10, 32, 32));
        let oracle = naive_conv(&x, &k, PadSpec::default());
        for (a, b) in y.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }

        // padded, asymmetric, multi-input
        let x = random_stack(&mut rng, 3, 5, 4);
        let k = random_bank(&mut rng, 2, 3, 3, 4);
        let pad = resolve_padding((5, 4), (8, 9), (3, 4)).unwrap();
        let y = conv_bank(&x, &k, pad).unwrap();
        assert_eq!(y.dims(), (2, 8, 9));
        let oracle = naive_conv(&x, &k, pad);
        for (a, b) in y.as_slice().iter().zip(oracle.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_rejects_wrong_map_count() {
        let x = MapStack::zeros(2, 4, 4);
        let k = KernelBank::zeros(1, 3, 2, 2);
        assert!(matches!(conv_bank(&x, &k, PadSpec::default()), Err(Error::Topology(_))));
    }

    #[test]
    fn adjoint_zero_and_scalar() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_stack(&mut rng, 2, 6, 6);
        let k = random_bank(&mut rng, 3, 2, 3, 3);
        let g = MapStack::zeros(3, 4, 4);
        let (gi, gk) = conv_bank_adjoint(&g, &x, &k, PadSpec::default()).unwrap();
        assert!(gi.as_slice().iter().all(|&v| v == 0.0));
        assert!(gk.as_slice().iter().all(|&v| v == 0.0));

        let x = MapStack::from_vec(1, 1, 1, vec![0.7]).unwrap();
        let k = KernelBank::from_vec(1, 1, 1, 1, vec![-1.3]).unwrap();
        let g = MapStack::from_vec(1, 1, 1, vec![2.5]).unwrap();
        let (gi, gk) = conv_bank_adjoint(&g, &x, &k, PadSpec::default()).unwrap();
        assert_eq!(gi.as_slice(), &[-1.3 * 2.5]);
        assert_eq!(gk.as_slice(), &[0.7 * 2.5]);
    }

    #[test]
    fn adjoint_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_stack(&mut rng, 2, 4, 5);
        let k = random_bank(&mut rng, 2, 2, 3, 2);
        let pad = resolve_padding((4, 5), (5, 6), (3, 2)).unwrap();
        let g = random_stack(&mut rng, 2, 5, 6);
        let objective = |x: &MapStack, k: &KernelBank| {
            conv_bank(x, k, pad).unwrap().as_slice().iter().zip(g.as_slice()).map(|(a, b)| (a * b).sin()).sum::<f64>()
        };
        // chain rule through sin: upstream gradient is g * cos(g * y)
        let y = conv_bank(&x, &k, pad).unwrap();
        let upstream = MapStack::from_vec(
            2,
            5,
            6,
            y.as_slice().iter().zip(g.as_slice()).map(|(a, b)| b * (a * b).cos()).collect(),
        )
        .unwrap();
        let (gi, gk) = conv_bank_adjoint(&upstream, &x, &k, pad).unwrap();
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[idx] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[idx] -= h;
            let fd = (objective(&xp, &k) - objective(&xm, &k)) / (2.0 * h);
            let an = gi.as_slice()[idx];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(fd.abs()).max(1e-3), "input {idx}: {an} vs {fd}");
        }
        for idx in 0..k.as_slice().len() {
            let mut kp = k.clone();
            kp.as_mut_slice()[idx] += h;
            let mut km = k.clone();
            km.as_mut_slice()[idx] -= h;
            let fd = (objective(&x, &kp) - objective(&x, &km)) / (2.0 * h);
            let an = gk.as_slice()[idx];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(fd.abs()).max(1e-3), "kernel {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn scaled_tanh_values() {
        assert_eq!(scaled_tanh(0.0), 0.0);
        assert!((scaled_tanh_prime(0.0) - 1.143933).abs() < 1e-6);
        assert!((scaled_tanh(1.5) - 1.7159 * 1.0f64.tanh()).abs() < 1e-15);
        assert!((scaled_tanh(50.0) - TANH_AMPLITUDE).abs() < 1e-12);
        // the activation maps +-1 onto +-1 (to within the rounding of its constants)
        assert!((scaled_tanh(1.0) - 1.0).abs() < 1e-4);
        let x = 0.37;
        assert!((scaled_tanh_prime_from_output(scaled_tanh(x)) - scaled_tanh_prime(x)).abs() < 1e-14);
    }

    #[test]
    fn elementwise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_stack(&mut rng, 1, 26, 26);
        let ones = MapStack::filled(1, 26, 26, 1.0);
        assert_eq!(elementwise_mac(&a, &ones).unwrap(), a);
        let z = MapStack::zeros(1, 26, 26);
        assert!(elementwise_mac(&z, &a).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let w = random_stack(&mut rng, 1, 26, 26);
        let y = elementwise_mac(&a, &w).unwrap();
        for r in 0..26 {
            for c in 0..26 {
                assert_eq!(y.get(0, r, c), a.get(0, r, c) * w.get(0, r, c));
            }
        }
        let (ga, gw) = elementwise_mac_adjoint(&ones, &a, &w).unwrap();
        assert_eq!(ga, w);
        assert_eq!(gw, a);
        assert!(elementwise_mac(&a, &MapStack::zeros(1, 25, 26)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn conv_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0,
                          h in 3usize..8, w in 3usize..8, dh in 0usize..4, dw in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_stack(&mut rng, 2, h, w);
            let y = random_stack(&mut rng, 2, h, w);
            let k = random_bank(&mut rng, 3, 2, 3, 3);
            let pad = resolve_padding((h, w), (h + dh, w + dw), (3, 3)).unwrap();
            let mut xy = x.clone();
            xy.scale(alpha);
            xy.add_scaled(&y, beta);
            let lhs = conv_bank(&xy, &k, pad).unwrap();
            let mut rhs = conv_bank(&x, &k, pad).unwrap();
            rhs.scale(alpha);
            rhs.add_scaled(&conv_bank(&y, &k, pad).unwrap(), beta);
            let scale = rhs.max_abs().max(1.0);
            for (a, b) in lhs.as_slice().iter().zip(rhs.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn adjoint_dot_product_identity(seed in 0u64..1000, h in 2usize..9, w in 2usize..9,
                                        dh in 0usize..5, dw in 0usize..5, kh in 1usize..4, kw in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_stack(&mut rng, 2, h, w);
            let k = random_bank(&mut rng, 3, 2, kh, kw);
            let pad = resolve_padding((h, w), (h + dh, w + dw), (kh, kw)).unwrap();
            let y = conv_bank(&x, &k, pad).unwrap();
            prop_assert_eq!((y.height(), y.width()), (h + dh, w + dw));
            let g = random_stack(&mut rng, 3, y.height(), y.width());
            let (gi, gk) = conv_bank_adjoint(&g, &x, &k, pad).unwrap();
            let lhs = g.dot(&y);
            let via_x = gi.dot(&x);
            let via_k: f64 = gk.as_slice().iter().zip(k.as_slice()).map(|(a, b)| a * b).sum();
            let scale = lhs.abs().max(1.0);
            prop_assert!((lhs - via_x).abs() <= 1e-10 * scale);
            prop_assert!((lhs - via_k).abs() <= 1e-10 * scale);
        }

        #[test]
        fn scaled_tanh_is_odd_and_bounded(x in -30.0f64..30.0) {
            prop_assert_eq!(scaled_tanh(-x), -scaled_tanh(x));
            prop_assert!(scaled_tanh(x).abs() < TANH_AMPLITUDE || x.abs() > 20.0);
            prop_assert!(scaled_tanh(x).abs() <= TANH_AMPLITUDE);
        }
    }
}
