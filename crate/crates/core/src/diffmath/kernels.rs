//! Forward and adjoint kernels on raw row-major buffers.
//!
//! Image tensors are NCHW. Convolution kernels are `[C_out, C_in, KH, KW]`;
//! transposed-convolution kernels are `[C_in, C_out, KH, KW]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;

/// Output positions `o` in `0..out_len` whose tap `o * stride + k - pad`
/// lands inside `0..in_len`, as a half-open range.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= in_len - 1
    let top = in_len + pad - 1;
    if k > top {
        return (0, 0);
    }
    let hi = ((top - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    /// Channels / spatial size of the large (conv input, transposed output) side.
    pub cl: usize,
    pub hl: usize,
    pub wl: usize,
    /// Channels / spatial size of the small (conv output, transposed input) side.
    pub cs: usize,
    pub hs: usize,
    pub ws: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn conv_out(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = len + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }

    /// Visits every run of taps for one channel pair as
    /// `(small start, large start, run length, kernel offset)`. Within a run the
    /// small index advances by 1 and the large index by `stride`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for a in 0..self.kh {
            let (oh_lo, oh_hi) = valid_range(self.hs, self.hl, self.stride, a, self.pad);
            for b in 0..self.kw {
                let (ow_lo, ow_hi) = valid_range(self.ws, self.wl, self.stride, b, self.pad);
                if ow_lo == ow_hi {
                    continue;
                }
                let kofs = a * self.kw + b;
                for oh in oh_lo..oh_hi {
                    let ih = oh * self.stride + a - self.pad;
                    let iw = ow_lo * self.stride + b - self.pad;
                    f(oh * self.ws + ow_lo, ih * self.wl + iw, ow_hi - ow_lo, kofs);
                }
            }
        }
    }
}

/// `small[s0..s0+len] += a · large[l0], large[l0+stride], …`
#[inline]
fn gather_axpy(small: &mut [f64], large: &[f64], stride: usize, a: f64) {
    if stride == 1 {
        for (d, s) in small.iter_mut().zip(large) {
            *d += a * s;
        }
    } else {
        for (d, s) in small.iter_mut().zip(large.iter().step_by(stride)) {
            *d += a * s;
        }
    }
}

/// `large[l0], large[l0+stride], … += a · small[..]`
#[inline]
fn scatter_axpy(large: &mut [f64], small: &[f64], stride: usize, a: f64) {
    if stride == 1 {
        for (d, s) in large.iter_mut().zip(small) {
            *d += a * s;
        }
    } else {
        for (d, s) in large.iter_mut().step_by(stride).zip(small) {
            *d += a * s;
        }
    }
}

#[inline]
fn strided_dot(small: &[f64], large: &[f64], stride: usize) -> f64 {
    if stride == 1 {
        small.iter().zip(large).map(|(a, b)| a * b).sum()
    } else {
        small.iter().zip(large.iter().step_by(stride)).map(|(a, b)| a * b).sum()
    }
}

/// Span of the large buffer touched by a run.
#[inline]
fn span(l0: usize, len: usize, stride: usize) -> core::ops::Range<usize> {
    l0..l0 + (len - 1) * stride + 1
}

/// Cross-correlation: large input `[N, cl, hl, wl]`, kernel `[cs, cl, kh, kw]`,
/// output `[N, cs, hs, ws]`.
pub fn conv2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ps, pl, kp, st) = (g.hs * g.ws, g.hl * g.wl, g.kh * g.kw, g.stride);
    let mut out = vec![0.0; g.n * g.cs * ps];
    for n in 0..g.n {
        for co in 0..g.cs {
            let o = &mut out[(n * g.cs + co) * ps..][..ps];
            for ci in 0..g.cl {
                let xi = &x[(n * g.cl + ci) * pl..][..pl];
                let kk = &k[(co * g.cl + ci) * kp..][..kp];
                g.for_each_run(|s0, l0, len, t| gather_axpy(&mut o[s0..s0 + len], &xi[span(l0, len, st)], st, kk[t]));
            }
        }
    }
    out
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_grad_input(grad: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ps, pl, kp, st) = (g.hs * g.ws, g.hl * g.wl, g.kh * g.kw, g.stride);
    let mut dx = vec![0.0; g.n * g.cl * pl];
    for n in 0..g.n {
        for co in 0..g.cs {
            let go = &grad[(n * g.cs + co) * ps..][..ps];
            for ci in 0..g.cl {
                let d = &mut dx[(n * g.cl + ci) * pl..][..pl];
                let kk = &k[(co * g.cl + ci) * kp..][..kp];
                g.for_each_run(|s0, l0, len, t| scatter_axpy(&mut d[span(l0, len, st)], &go[s0..s0 + len], st, kk[t]));
            }
        }
    }
    dx
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_grad_kernel(grad: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ps, pl, kp, st) = (g.hs * g.ws, g.hl * g.wl, g.kh * g.kw, g.stride);
    let mut dk = vec![0.0; g.cs * g.cl * kp];
    for n in 0..g.n {
        for co in 0..g.cs {
            let go = &grad[(n * g.cs + co) * ps..][..ps];
            for ci in 0..g.cl {
                let xi = &x[(n * g.cl + ci) * pl..][..pl];
                let d = &mut dk[(co * g.cl + ci) * kp..][..kp];
                g.for_each_run(|s0, l0, len, t| d[t] += strided_dot(&go[s0..s0 + len], &xi[span(l0, len, st)], st));
            }
        }
    }
    dk
}

/// Transposed convolution: small input `[N, cs, hs, ws]`, kernel
/// `[cs, cl, kh, kw]`, output `[N, cl, hl, wl]`.
pub fn conv_transpose2d(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ps, pl, kp, st) = (g.hs * g.ws, g.hl * g.wl, g.kh * g.kw, g.stride);
    let mut out = vec![0.0; g.n * g.cl * pl];
    for n in 0..g.n {
        for ci in 0..g.cs {
            let xi = &x[(n * g.cs + ci) * ps..][..ps];
            for co in 0..g.cl {
                let o = &mut out[(n * g.cl + co) * pl..][..pl];
                let kk = &k[(ci * g.cl + co) * kp..][..kp];
                g.for_each_run(|s0, l0, len, t| scatter_axpy(&mut o[span(l0, len, st)], &xi[s0..s0 + len], st, kk[t]));
            }
        }
    }
    out
}

pub fn conv_transpose2d_grad_input(grad: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ps, pl, kp, st) = (g.hs * g.ws, g.hl * g.wl, g.kh * g.kw, g.stride);
    let mut dx = vec![0.0; g.n * g.cs * ps];
    for n in 0..g.n {
        for ci in 0..g.cs {
            let d = &mut dx[(n * g.cs + ci) * ps..][..ps];
            for co in 0..g.cl {
                let go = &grad[(n * g.cl + co) * pl..][..pl];
                let kk = &k[(ci * g.cl + co) * kp..][..kp];
                g.for_each_run(|s0, l0, len, t| gather_axpy(&mut d[s0..s0 + len], &go[span(l0, len, st)], st, kk[t]));
            }
        }
    }
    dx
}

pub fn conv_transpose2d_grad_kernel(grad: &[f64], x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (ps, pl, kp, st) = (g.hs * g.ws, g.hl * g.wl, g.kh * g.kw, g.stride);
    let mut dk = vec![0.0; g.cs * g.cl * kp];
    for n in 0..g.n {
        for ci in 0..g.cs {
            let xi = &x[(n * g.cs + ci) * ps..][..ps];
            for co in 0..g.cl {
                let go = &grad[(n * g.cl + co) * pl..][..pl];
                let d = &mut dk[(ci * g.cl + co) * kp..][..kp];
                g.for_each_run(|s0, l0, len, t| d[t] += strided_dot(&xi[s0..s0 + len], &go[span(l0, len, st)], st));
            }
        }
    }
    dk
}

/// `[n, k] x [k, m] -> [n, m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `grad · bᵀ` for `grad: [n, m]`, `b: [k, m]`.
pub fn matmul_grad_a(grad: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        let g = &grad[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            out[i * k + p] = g.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · grad` for `a: [n, k]`, `grad: [n, m]`.
pub fn matmul_grad_b(grad: &[f64], a: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let g = &grad[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in row.iter_mut().zip(g) {
                *o += av * gv;
            }
        }
    }
    out
}

/// Per-axis interpolation table for bilinear resampling with
/// align-corners-false coordinates (`src = (dst + 0.5) * in / out - 0.5`,
/// clamped at zero).
#[derive(Debug, Clone)]
pub struct LerpAxis {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl LerpAxis {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut lo = Vec::with_capacity(out_len);
        let mut hi = Vec::with_capacity(out_len);
        let mut w_hi = Vec::with_capacity(out_len);
        for o in 0..out_len {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (math::floor(src) as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
            lo.push(i0);
            hi.push(i1);
            w_hi.push(w);
        }
        Self { lo, hi, w_hi }
    }
}

pub fn resize_bilinear(x: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ay = LerpAxis::new(h, oh);
    let ax = LerpAxis::new(w, ow);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for i in 0..oh {
            let (y0, y1, wy) = (ay.lo[i], ay.hi[i], ay.w_hi[i]);
            for j in 0..ow {
                let (x0, x1, wx) = (ax.lo[j], ax.hi[j], ax.w_hi[j]);
                let top = (1.0 - wx) * src[y0 * w + x0] + wx * src[y0 * w + x1];
                let bot = (1.0 - wx) * src[y1 * w + x0] + wx * src[y1 * w + x1];
                dst[i * ow + j] = (1.0 - wy) * top + wy * bot;
            }
        }
    }
    out
}

pub fn resize_bilinear_grad(grad: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let ay = LerpAxis::new(h, oh);
    let ax = LerpAxis::new(w, ow);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let g = &grad[p * oh * ow..][..oh * ow];
        let d = &mut dx[p * h * w..][..h * w];
        for i in 0..oh {
            let (y0, y1, wy) = (ay.lo[i], ay.hi[i], ay.w_hi[i]);
            for j in 0..ow {
                let (x0, x1, wx) = (ax.lo[j], ax.hi[j], ax.w_hi[j]);
                let gv = g[i * ow + j];
                d[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                d[y0 * w + x1] += gv * (1.0 - wy) * wx;
                d[y1 * w + x0] += gv * wy * (1.0 - wx);
                d[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    dx
}

/// Places each `h x w` plane at `(top, left)` inside a zeroed `oh x ow` plane.
#[allow(clippy::too_many_arguments)]
pub fn zero_pad(x: &[f64], planes: usize, h: usize, w: usize, top: usize, left: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..h {
            let src = &x[(p * h + i) * w..][..w];
            out[(p * oh + top + i) * ow + left..][..w].copy_from_slice(src);
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn zero_pad_grad(grad: &[f64], planes: usize, h: usize, w: usize, top: usize, left: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..h {
            dx[(p * h + i) * w..][..w].copy_from_slice(&grad[(p * oh + top + i) * ow + left..][..w]);
        }
    }
    dx
}

/// Non-overlapping `k x k` pooling. Returns pooled values and, for max
/// pooling, the flat input index selected per output.
pub fn pool2d(x: &[f64], planes: usize, h: usize, w: usize, k: usize, max: bool) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; planes * oh * ow];
    let mut arg = if max { vec![0; planes * oh * ow] } else { Vec::new() };
    let inv = 1.0 / (k * k) as f64;
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let o = (p * oh + i) * ow + j;
                let mut acc = 0.0;
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                for a in 0..k {
                    for b in 0..k {
                        let idx = (p * h + i * k + a) * w + j * k + b;
                        let v = x[idx];
                        acc += v;
                        if v > best {
                            best = v;
                            best_at = idx;
                        }
                    }
                }
                if max {
                    out[o] = best;
                    arg[o] = best_at;
                } else {
                    out[o] = acc * inv;
                }
            }
        }
    }
    (out, arg)
}

pub fn avg_pool2d_grad(grad: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let gv = grad[(p * oh + i) * ow + j] * inv;
                for a in 0..k {
                    for b in 0..k {
                        dx[(p * h + i * k + a) * w + j * k + b] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-(n, c) mean and population standard deviation over the trailing axes.
pub fn channel_stats(x: &[f64], groups: usize, inner: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::with_capacity(groups);
    let mut std = Vec::with_capacity(groups);
    let inv = 1.0 / inner as f64;
    for g in 0..groups {
        let s = &x[g * inner..][..inner];
        let mu = s.iter().sum::<f64>() * inv;
        let var = s.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() * inv;
        mean.push(mu);
        std.push(math::sqrt(var));
    }
    (mean, std)
}

/// Sorted-descending position `k` (1-based) among the entries of `row`
/// other than `skip`. Returns the column index; ties prefer the lowest index.
pub fn kth_largest_excluding(row: &[f64], skip: usize, k: usize) -> usize {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&j| j != skip).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(core::cmp::Ordering::Equal));
    idx[k - 1]
}
