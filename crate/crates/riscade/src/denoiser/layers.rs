//! Tensor layer primitives with hand-derived backward passes.
//!
//! All tensors are `[batch, channels, height, width]` arrays in standard
//! (row-major) layout. Every forward here has a matching backward that
//! computes the exact adjoint of the forward's linearization — no autodiff,
//! no approximation — so a finite-difference check can hold the whole stack
//! to tight tolerances. Reduction orders are fixed (plain nested loops), so
//! repeated runs are bit-identical.

use ndarray::{s, Array1, Array3, Array4};

use super::TensorFloat;
use crate::{Error, Result};

#[inline]
fn dims4<T>(a: &Array4<T>) -> (usize, usize, usize, usize) {
    a.dim()
}

/// `y += alpha * x` over contiguous spans; the innermost loop of convolution.
#[inline]
fn axpy<T: TensorFloat>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = *yv + alpha * *xv;
    }
}

#[inline]
fn dot<T: TensorFloat>(x: &[T], y: &[T]) -> T {
    let mut acc = T::zero();
    for (a, b) in x.iter().zip(y) {
        acc = acc + *a * *b;
    }
    acc
}

/// Mirror index for reflected padding without edge duplication: positions
/// just outside the array fold back over the border (`-1 -> 1`,
/// `n -> n - 2`). Valid while the padding stays below the axis length.
#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut r = i;
    if r < 0 {
        r = -r;
    }
    if r >= n {
        r = 2 * (n - 1) - r;
    }
    debug_assert!((0..n).contains(&r), "padding exceeds the axis length");
    r as usize
}

/// Grows each spatial border by `p` rows/columns of mirrored content.
fn pad_reflect<T: TensorFloat>(x: &Array4<T>, p: usize) -> Result<Array4<T>> {
    let (bsz, c, h, w) = dims4(x);
    if p >= h || p >= w {
        return Err(Error::Shape(format!(
            "{h}x{w} input is too small for {p}-pixel reflected padding"
        )));
    }
    let mut y = Array4::zeros((bsz, c, h + 2 * p, w + 2 * p));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..h + 2 * p {
                let si = reflect_index(i as isize - p as isize, h);
                for j in 0..w + 2 * p {
                    let sj = reflect_index(j as isize - p as isize, w);
                    y[[b, ch, i, j]] = x[[b, ch, si, sj]];
                }
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`pad_reflect`]: every padded position adds its gradient back
/// onto the interior cell it mirrored.
fn reflect_fold<T: TensorFloat>(grad_padded: &Array4<T>, p: usize) -> Array4<T> {
    let (bsz, c, hp, wp) = dims4(grad_padded);
    let (h, w) = (hp - 2 * p, wp - 2 * p);
    let mut y = Array4::zeros((bsz, c, h, w));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..hp {
                let si = reflect_index(i as isize - p as isize, h);
                for j in 0..wp {
                    let sj = reflect_index(j as isize - p as isize, w);
                    y[[b, ch, si, sj]] = y[[b, ch, si, sj]] + grad_padded[[b, ch, i, j]];
                }
            }
        }
    }
    y
}

fn crop_center<T: TensorFloat>(x: &Array4<T>, p: usize) -> Array4<T> {
    let (_, _, h, w) = dims4(x);
    x.slice(s![.., .., p..h - p, p..w - p]).to_owned()
}

/// Adjoint of [`crop_center`]: embeds the gradient in a zero ring.
fn embed_center<T: TensorFloat>(g: &Array4<T>, p: usize) -> Array4<T> {
    let (bsz, c, h, w) = dims4(g);
    let mut y = Array4::zeros((bsz, c, h + 2 * p, w + 2 * p));
    y.slice_mut(s![.., .., p..h + p, p..w + p]).assign(g);
    y
}

/// 2-D convolution (cross-correlation) with odd kernel and "same" padding,
/// so spatial dimensions are preserved. Borders are padded with mirrored
/// content rather than zeros: the surrounding channel is spatially
/// correlated, so a mirrored border is a far better stand-in for the unseen
/// neighborhood than silence, and filters trained on small windows keep
/// working when slid across larger inputs.
///
/// Weight layout is `[c_out, c_in, k, k]`. The kernel is constructed at
/// zero; initialization policy lives with the network, not the layer.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Array4<T>,
    pub bias: Array1<T>,
}

impl<T: TensorFloat> Conv2d<T> {
    pub fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        assert!(k % 2 == 1, "convolution kernel must be odd, got {k}");
        assert!(c_out > 0 && c_in > 0);
        Conv2d {
            weight: Array4::zeros((c_out, c_in, k, k)),
            bias: Array1::zeros(c_out),
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim().0
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim().1
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// `y[b,o,i,j] = bias[o] + sum_{c,ki,kj} w[o,c,ki,kj] * x[b,c,i+ki-p,j+kj-p]`
    /// with mirrored borders and `p = k/2`.
    pub fn forward(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let p = self.kernel() / 2;
        if p == 0 {
            return self.forward_zero_pad(x);
        }
        // Valid convolution over the mirror-padded input: the kernel loop
        // below pads with zeros, but the cropped centre never reads them.
        let xp = pad_reflect(x, p)?;
        let yp = self.forward_zero_pad(&xp)?;
        Ok(crop_center(&yp, p))
    }

    /// Same-size convolution with zero borders; the inner kernel shared by
    /// the mirrored forward/backward pair.
    fn forward_zero_pad(&self, x: &Array4<T>) -> Result<Array4<T>> {
        let (bsz, c_in, h, w) = dims4(x);
        let (c_out, wc_in, k, _) = dims4(&self.weight);
        if wc_in != c_in {
            return Err(Error::Shape(format!(
                "convolution expects {wc_in} input channels, got {c_in}"
            )));
        }
        let p = k / 2;
        let mut y = Array4::zeros((bsz, c_out, h, w));
        let hw = h * w;
        {
            let xs = x.as_slice().expect("inputs are standard layout");
            let ys = y.as_slice_mut().expect("fresh array is standard layout");
            for b in 0..bsz {
                for co in 0..c_out {
                    let y_base = (b * c_out + co) * hw;
                    let bv = self.bias[co];
                    for v in &mut ys[y_base..y_base + hw] {
                        *v = bv;
                    }
                    for ci in 0..c_in {
                        let x_base = (b * c_in + ci) * hw;
                        for ki in 0..k {
                            let i_lo = p.saturating_sub(ki);
                            let i_hi = (h + p).saturating_sub(ki).min(h);
                            for kj in 0..k {
                                let wv = self.weight[[co, ci, ki, kj]];
                                if wv == T::zero() {
                                    continue;
                                }
                                let j_lo = p.saturating_sub(kj);
                                let j_hi = (w + p).saturating_sub(kj).min(w);
                                if j_lo >= j_hi {
                                    continue;
                                }
                                let span = j_hi - j_lo;
                                for i in i_lo..i_hi {
                                    let r = i + ki - p;
                                    let c0 = j_lo + kj - p;
                                    let xo = x_base + r * w + c0;
                                    let yo = y_base + i * w + j_lo;
                                    axpy(wv, &xs[xo..xo + span], &mut ys[yo..yo + span]);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    /// Gradients of a scalar loss with respect to the input, the weights and
    /// the bias, given the forward input and the loss gradient at the output.
    pub fn backward(&self, x: &Array4<T>, grad_y: &Array4<T>) -> (Array4<T>, Array4<T>, Array1<T>) {
        let p = self.kernel() / 2;
        if p == 0 {
            return self.backward_zero_pad(x, grad_y);
        }
        let xp = pad_reflect(x, p).expect("forward validated the shape");
        let gyp = embed_center(grad_y, p);
        let (gxp, dw, db) = self.backward_zero_pad(&xp, &gyp);
        (reflect_fold(&gxp, p), dw, db)
    }

    fn backward_zero_pad(
        &self,
        x: &Array4<T>,
        grad_y: &Array4<T>,
    ) -> (Array4<T>, Array4<T>, Array1<T>) {
        let (bsz, c_in, h, w) = dims4(x);
        let (c_out, wc_in, k, _) = dims4(&self.weight);
        debug_assert_eq!(wc_in, c_in);
        debug_assert_eq!(grad_y.dim(), (bsz, c_out, h, w));
        let p = k / 2;
        let hw = h * w;
        let mut grad_x = Array4::zeros((bsz, c_in, h, w));
        let mut dw = Array4::zeros((c_out, c_in, k, k));
        let mut db = Array1::zeros(c_out);
        {
            let xs = x.as_slice().expect("inputs are standard layout");
            let gys = grad_y.as_slice().expect("gradients are standard layout");
            let gxs = grad_x.as_slice_mut().expect("fresh array");
            for b in 0..bsz {
                for co in 0..c_out {
                    let y_base = (b * c_out + co) * hw;
                    let mut bsum = T::zero();
                    for v in &gys[y_base..y_base + hw] {
                        bsum = bsum + *v;
                    }
                    db[co] = db[co] + bsum;
                    for ci in 0..c_in {
                        let x_base = (b * c_in + ci) * hw;
                        for ki in 0..k {
                            let i_lo = p.saturating_sub(ki);
                            let i_hi = (h + p).saturating_sub(ki).min(h);
                            for kj in 0..k {
                                let j_lo = p.saturating_sub(kj);
                                let j_hi = (w + p).saturating_sub(kj).min(w);
                                if j_lo >= j_hi || i_lo >= i_hi {
                                    continue;
                                }
                                let span = j_hi - j_lo;
                                let wv = self.weight[[co, ci, ki, kj]];
                                let mut wsum = T::zero();
                                for i in i_lo..i_hi {
                                    let r = i + ki - p;
                                    let c0 = j_lo + kj - p;
                                    let xo = x_base + r * w + c0;
                                    let yo = y_base + i * w + j_lo;
                                    wsum = wsum + dot(&gys[yo..yo + span], &xs[xo..xo + span]);
                                    if wv != T::zero() {
                                        axpy(wv, &gys[yo..yo + span], &mut gxs[xo..xo + span]);
                                    }
                                }
                                dw[[co, ci, ki, kj]] = dw[[co, ci, ki, kj]] + wsum;
                            }
                        }
                    }
                }
            }
        }
        (grad_x, dw, db)
    }
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, which of the four window positions (`di*2 + dj`) won; ties go to
/// the earliest position in scan order. Odd spatial dimensions are rejected
/// rather than silently truncated.
pub fn maxpool2<T: TensorFloat>(x: &Array4<T>) -> Result<(Array4<T>, Array4<u8>)> {
    let (bsz, c, h, w) = dims4(x);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x2 max pooling needs even spatial dimensions, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((bsz, c, oh, ow));
    let mut arg = Array4::zeros((bsz, c, oh, ow));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = x[[b, ch, 2 * i, 2 * j]];
                    let mut best_at = 0u8;
                    for di in 0..2usize {
                        for dj in 0..2usize {
                            let v = x[[b, ch, 2 * i + di, 2 * j + dj]];
                            if v > best {
                                best = v;
                                best_at = (di * 2 + dj) as u8;
                            }
                        }
                    }
                    y[[b, ch, i, j]] = best;
                    arg[[b, ch, i, j]] = best_at;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Routes each output gradient back to the input position that won the max.
pub fn maxpool2_backward<T: TensorFloat>(argmax: &Array4<u8>, grad_y: &Array4<T>) -> Array4<T> {
    let (bsz, c, oh, ow) = dims4(grad_y);
    debug_assert_eq!(argmax.dim(), (bsz, c, oh, ow));
    let mut gx = Array4::zeros((bsz, c, 2 * oh, 2 * ow));
    for b in 0..bsz {
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let at = argmax[[b, ch, i, j]] as usize;
                    let (di, dj) = (at / 2, at % 2);
                    gx[[b, ch, 2 * i + di, 2 * j + dj]] =
                        gx[[b, ch, 2 * i + di, 2 * j + dj]] + grad_y[[b, ch, i, j]];
                }
            }
        }
    }
    gx
}

/// Per-axis interpolation table: output index -> (lower source, upper source,
/// lower weight, upper weight). Source positions follow the half-pixel
/// convention `src = (out + 0.5)/factor - 0.5`, clamped at the edges, so a
/// `[1, 3]` row upsampled by 2 becomes `[1, 1.5, 2.5, 3]`.
fn interp_axis<T: TensorFloat>(n_in: usize, factor: usize) -> Vec<(usize, usize, T, T)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (
                i0,
                i1,
                T::from_f64_lossy(1.0 - frac),
                T::from_f64_lossy(frac),
            )
        })
        .collect()
}

/// Bilinear upsampling by an integer factor, applied in a single step (an
/// 8x enlargement interpolates the original grid once at factor 8, which is
/// not the same as three successive doublings).
pub fn bilinear_up<T: TensorFloat>(x: &Array4<T>, factor: usize) -> Array4<T> {
    assert!(factor >= 1);
    let (bsz, c, h, w) = dims4(x);
    let rows = interp_axis::<T>(h, factor);
    let cols = interp_axis::<T>(w, factor);
    let mut y = Array4::zeros((bsz, c, h * factor, w * factor));
    for b in 0..bsz {
        for ch in 0..c {
            for (oi, &(i0, i1, wi0, wi1)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, wj0, wj1)) in cols.iter().enumerate() {
                    let top = wj0 * x[[b, ch, i0, j0]] + wj1 * x[[b, ch, i0, j1]];
                    let bot = wj0 * x[[b, ch, i1, j0]] + wj1 * x[[b, ch, i1, j1]];
                    y[[b, ch, oi, oj]] = wi0 * top + wi1 * bot;
                }
            }
        }
    }
    y
}

/// Exact adjoint of [`bilinear_up`]: scatters each output gradient onto the
/// four source corners with the same interpolation weights.
pub fn bilinear_up_backward<T: TensorFloat>(
    grad_y: &Array4<T>,
    in_h: usize,
    in_w: usize,
    factor: usize,
) -> Array4<T> {
    let (bsz, c, oh, ow) = dims4(grad_y);
    debug_assert_eq!((oh, ow), (in_h * factor, in_w * factor));
    let rows = interp_axis::<T>(in_h, factor);
    let cols = interp_axis::<T>(in_w, factor);
    let mut gx = Array4::zeros((bsz, c, in_h, in_w));
    for b in 0..bsz {
        for ch in 0..c {
            for (oi, &(i0, i1, wi0, wi1)) in rows.iter().enumerate() {
                for (oj, &(j0, j1, wj0, wj1)) in cols.iter().enumerate() {
                    let g = grad_y[[b, ch, oi, oj]];
                    gx[[b, ch, i0, j0]] = gx[[b, ch, i0, j0]] + wi0 * wj0 * g;
                    gx[[b, ch, i0, j1]] = gx[[b, ch, i0, j1]] + wi0 * wj1 * g;
                    gx[[b, ch, i1, j0]] = gx[[b, ch, i1, j0]] + wi1 * wj0 * g;
                    gx[[b, ch, i1, j1]] = gx[[b, ch, i1, j1]] + wi1 * wj1 * g;
                }
            }
        }
    }
    gx
}

pub fn relu<T: TensorFloat>(x: &Array4<T>) -> Array4<T> {
    x.mapv(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient mask `x > 0`; the kink at exactly zero passes nothing through.
pub fn relu_backward<T: TensorFloat>(x: &Array4<T>, grad_y: &Array4<T>) -> Array4<T> {
    debug_assert_eq!(x.dim(), grad_y.dim());
    let mut gx = grad_y.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= T::zero() {
            *g = T::zero();
        }
    });
    gx
}

/// Per-channel batch normalization over `[batch, height, width]`.
///
/// Training normalizes with the biased batch variance (divide by `n`) while
/// the running variance accumulates the unbiased estimate (divide by `n-1`),
/// blended as `running = (1-momentum)*running + momentum*batch`; evaluation
/// uses the running statistics only.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub eps: T,
    pub momentum: T,
}

/// Values saved by the training forward pass that the backward pass needs.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
}

impl<T: TensorFloat> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: T::from_f64_lossy(1e-5),
            momentum: T::from_f64_lossy(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward_train(&mut self, x: &Array4<T>) -> (Array4<T>, BnCache<T>) {
        let (bsz, c, h, w) = dims4(x);
        debug_assert_eq!(c, self.channels());
        let n = bsz * h * w;
        let nf = T::from_f64_lossy(n as f64);
        let mut xhat = Array4::zeros((bsz, c, h, w));
        let mut inv_std = Array1::zeros(c);
        let mut y = Array4::zeros((bsz, c, h, w));
        for ch in 0..c {
            let view = x.slice(s![.., ch, .., ..]);
            let mut sum = T::zero();
            for v in view.iter() {
                sum = sum + *v;
            }
            let mean = sum / nf;
            let mut sq = T::zero();
            for v in view.iter() {
                let d = *v - mean;
                sq = sq + d * d;
            }
            let var = sq / nf;
            let istd = T::one() / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let (g, bt) = (self.gamma[ch], self.beta[ch]);
            for b in 0..bsz {
                for i in 0..h {
                    for j in 0..w {
                        let xh = (x[[b, ch, i, j]] - mean) * istd;
                        xhat[[b, ch, i, j]] = xh;
                        y[[b, ch, i, j]] = g * xh + bt;
                    }
                }
            }
            let unbiased = if n > 1 {
                var * nf / T::from_f64_lossy((n - 1) as f64)
            } else {
                var
            };
            let m = self.momentum;
            self.running_mean[ch] = (T::one() - m) * self.running_mean[ch] + m * mean;
            self.running_var[ch] = (T::one() - m) * self.running_var[ch] + m * unbiased;
        }
        (y, BnCache { xhat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array4<T>) -> Array4<T> {
        let (bsz, c, h, w) = dims4(x);
        debug_assert_eq!(c, self.channels());
        let mut y = Array4::zeros((bsz, c, h, w));
        for ch in 0..c {
            let istd = T::one() / (self.running_var[ch] + self.eps).sqrt();
            let (g, bt, mean) = (self.gamma[ch], self.beta[ch], self.running_mean[ch]);
            for b in 0..bsz {
                for i in 0..h {
                    for j in 0..w {
                        y[[b, ch, i, j]] = g * (x[[b, ch, i, j]] - mean) * istd + bt;
                    }
                }
            }
        }
        y
    }

    /// Backward through the training-mode forward. The batch mean and
    /// variance depend on every element, which is what the two correction
    /// sums account for.
    pub fn backward(
        &self,
        cache: &BnCache<T>,
        grad_y: &Array4<T>,
    ) -> (Array4<T>, Array1<T>, Array1<T>) {
        let (bsz, c, h, w) = dims4(grad_y);
        debug_assert_eq!(cache.xhat.dim(), (bsz, c, h, w));
        let n = bsz * h * w;
        let nf = T::from_f64_lossy(n as f64);
        let mut grad_x = Array4::zeros((bsz, c, h, w));
        let mut dgamma = Array1::zeros(c);
        let mut dbeta = Array1::zeros(c);
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for b in 0..bsz {
                for i in 0..h {
                    for j in 0..w {
                        let g = grad_y[[b, ch, i, j]];
                        sum_g = sum_g + g;
                        sum_gx = sum_gx + g * cache.xhat[[b, ch, i, j]];
                    }
                }
            }
            dbeta[ch] = sum_g;
            dgamma[ch] = sum_gx;
            let scale = self.gamma[ch] * cache.inv_std[ch] / nf;
            for b in 0..bsz {
                for i in 0..h {
                    for j in 0..w {
                        let g = grad_y[[b, ch, i, j]];
                        let xh = cache.xhat[[b, ch, i, j]];
                        grad_x[[b, ch, i, j]] = scale * (nf * g - sum_g - xh * sum_gx);
                    }
                }
            }
        }
        (grad_x, dgamma, dbeta)
    }
}

/// Stacks tensors along the channel axis; batch and spatial dimensions must
/// agree.
pub fn concat_channels<T: TensorFloat>(parts: &[&Array4<T>]) -> Result<Array4<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Argument("cannot concatenate zero tensors".into()))?;
    let (bsz, _, h, w) = dims4(first);
    let mut total = 0;
    for part in parts {
        let (pb, pc, ph, pw) = dims4(part);
        if (pb, ph, pw) != (bsz, h, w) {
            return Err(Error::Shape(format!(
                "channel concat needs matching batch/spatial dims, got \
                 {pb}x{pc}x{ph}x{pw} against {bsz}x_x{h}x{w}"
            )));
        }
        total += pc;
    }
    let mut out = Array4::zeros((bsz, total, h, w));
    let mut at = 0;
    for part in parts {
        let pc = part.dim().1;
        out.slice_mut(s![.., at..at + pc, .., ..]).assign(part);
        at += pc;
    }
    Ok(out)
}

/// Inverse of [`concat_channels`] for gradients: slices the channel axis
/// back into the given widths.
pub fn split_channels<T: TensorFloat>(grad: &Array4<T>, widths: &[usize]) -> Result<Vec<Array4<T>>> {
    let c = grad.dim().1;
    let total: usize = widths.iter().sum();
    if total != c {
        return Err(Error::Shape(format!(
            "channel split widths sum to {total} but tensor has {c} channels"
        )));
    }
    let mut out = Vec::with_capacity(widths.len());
    let mut at = 0;
    for &width in widths {
        out.push(grad.slice(s![.., at..at + width, .., ..]).to_owned());
        at += width;
    }
    Ok(out)
}

/// Real/imaginary planes of a complex matrix as a `[2, rows, cols]` block,
/// widened or narrowed to the tensor scalar type.
pub fn planes_to_tensor<T: TensorFloat>(planes: &Array3<f64>) -> Array3<T> {
    planes.mapv(T::from_f64_lossy)
}

pub fn tensor_to_planes<T: TensorFloat>(t: &Array3<T>) -> Array3<f64> {
    t.mapv(|v| v.to_f64_lossy())
}
