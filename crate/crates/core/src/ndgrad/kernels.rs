//! Raw forward/backward kernels over row-major slices.
//!
//! Shapes are validated by the callers in `ops` and `graph`; everything
//! here assumes consistent extents.

use crate::scalar::{lit, Scalar};

/// `c = a(m x k) * b(k x n) + beta * c`, with optional transposes of the
/// stored operands (`a` stored as `k x m` when `ta`, `b` as `n x k` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides describe views fully contained in the slices
    // checked above, and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Output positions `o` with `o*stride + k - pad` inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out: usize) -> std::ops::Range<usize> {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { ((len - 1 + pad - k) / stride + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = ho * wo;
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let ys = valid_range(ky, g.pad, g.stride, g.h, ho);
            for kx in 0..g.kw {
                let xs = valid_range(kx, g.pad, g.stride, g.w, wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                dst.fill(T::zero());
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let off = xs.start + kx - g.pad;
                        drow[xs.clone()].copy_from_slice(&src[off..off + xs.len()]);
                    } else {
                        for ox in xs.clone() {
                            drow[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = ho * wo;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let ys = valid_range(ky, g.pad, g.stride, g.h, ho);
            for kx in 0..g.kw {
                let xs = valid_range(kx, g.pad, g.stride, g.w, wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in ys.clone() {
                    let iy = oy * g.stride + ky - g.pad;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in xs.clone() {
                        drow[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom) -> bool {
    g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = ho * wo;
    let patch = g.patch();
    let mut out = vec![T::zero(); g.n * g.cout * cols];
    let mut col = vec![T::zero(); if is_pointwise(g) { 0 } else { patch * cols }];
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let on = &mut out[n * g.cout * cols..(n + 1) * g.cout * cols];
        if let Some(b) = b {
            for (co, chunk) in on.chunks_mut(cols).enumerate() {
                chunk.fill(b[co]);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        if is_pointwise(g) {
            gemm(g.cout, patch, cols, w, false, xn, false, beta, on);
        } else {
            im2col(g, xn, &mut col);
            gemm(g.cout, patch, cols, w, false, &col, false, beta, on);
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let cols = ho * wo;
    let patch = g.patch();
    let plane = g.cin * g.h * g.w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cout];
    let pointwise = is_pointwise(g);
    let mut col = vec![T::zero(); if pointwise { 0 } else { patch * cols }];
    let mut dcol = vec![T::zero(); if pointwise { 0 } else { patch * cols }];
    for n in 0..g.n {
        let xn = &x[n * plane..(n + 1) * plane];
        let dyn_ = &dy[n * g.cout * cols..(n + 1) * g.cout * cols];
        for (co, chunk) in dyn_.chunks(cols).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
        if pointwise {
            gemm(g.cout, cols, patch, dyn_, false, xn, true, T::one(), &mut dw);
            gemm(patch, g.cout, cols, w, true, dyn_, false, T::zero(), &mut dx[n * plane..(n + 1) * plane]);
        } else {
            im2col(g, xn, &mut col);
            gemm(g.cout, cols, patch, dyn_, false, &col, true, T::one(), &mut dw);
            gemm(patch, g.cout, cols, w, true, dyn_, false, T::zero(), &mut dcol);
            col2im(g, &dcol, &mut dx[n * plane..(n + 1) * plane]);
        }
    }
    (dx, dw, db)
}

/// Depthwise convolution: one `kh x kw` filter per channel (`w` is `[C,1,kh,kw]`).
pub fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![T::zero(); g.n * g.cin * ho * wo];
    for n in 0..g.n {
        for c in 0..g.cin {
            let plane = &x[(n * g.cin + c) * g.h * g.w..(n * g.cin + c + 1) * g.h * g.w];
            let filt = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[(n * g.cin + c) * ho * wo..(n * g.cin + c + 1) * ho * wo];
            dst.fill(b.map_or(T::zero(), |b| b[c]));
            for ky in 0..g.kh {
                let ys = valid_range(ky, g.pad, g.stride, g.h, ho);
                for kx in 0..g.kw {
                    let xs = valid_range(kx, g.pad, g.stride, g.w, wo);
                    let f = filt[ky * g.kw + kx];
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dst[oy * wo..(oy + 1) * wo];
                        if g.stride == 1 {
                            let off = xs.start + kx - g.pad;
                            for (d, &v) in drow[xs.clone()].iter_mut().zip(&src[off..off + xs.len()]) {
                                *d += f * v;
                            }
                        } else {
                            for ox in xs.clone() {
                                drow[ox] += f * src[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.cin];
    for n in 0..g.n {
        for c in 0..g.cin {
            let base = (n * g.cin + c) * g.h * g.w;
            let plane = &x[base..base + g.h * g.w];
            let dplane = &mut dx[base..base + g.h * g.w];
            let filt = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let src = &dy[(n * g.cin + c) * ho * wo..(n * g.cin + c + 1) * ho * wo];
            db[c] += src.iter().copied().sum::<T>();
            for ky in 0..g.kh {
                let ys = valid_range(ky, g.pad, g.stride, g.h, ho);
                for kx in 0..g.kw {
                    let xs = valid_range(kx, g.pad, g.stride, g.w, wo);
                    let f = filt[ky * g.kw + kx];
                    let mut acc = T::zero();
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let srow = &src[oy * wo..(oy + 1) * wo];
                        let xrow = &plane[iy * g.w..(iy + 1) * g.w];
                        let drow = &mut dplane[iy * g.w..(iy + 1) * g.w];
                        for ox in xs.clone() {
                            let ix = ox * g.stride + kx - g.pad;
                            acc += srow[ox] * xrow[ix];
                            drow[ix] += srow[ox] * f;
                        }
                    }
                    dw[c * g.kh * g.kw + ky * g.kw + kx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// `y[r, :] = x[r, :] W^T + b` with `W` stored `[dout, din]`.
pub fn linear_forward<T: Scalar>(x: &[T], rows: usize, din: usize, w: &[T], dout: usize, b: Option<&[T]>) -> Vec<T> {
    let mut y = vec![T::zero(); rows * dout];
    if let Some(b) = b {
        for row in y.chunks_mut(dout) {
            row.copy_from_slice(b);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(rows, din, dout, x, false, w, true, beta, &mut y);
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    din: usize,
    w: &[T],
    dout: usize,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); rows * din];
    gemm(rows, dout, din, dy, false, w, false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); dout * din];
    gemm(dout, rows, din, dy, true, x, false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); dout];
    for row in dy.chunks(dout) {
        for (acc, &v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

/// Numerically stable softmax over contiguous rows of length `len`.
pub fn softmax_rows<T: Scalar>(x: &[T], len: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(len) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    out
}

pub fn softmax_rows_backward<T: Scalar>(y: &[T], dy: &[T], len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for ((yr, dyr), dxr) in y.chunks(len).zip(dy.chunks(len)).zip(dx.chunks_mut(len)) {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for i in 0..len {
            dxr[i] = yr[i] * (dyr[i] - dot);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU, evaluated as `x · σ(2u)` with
/// `u = √(2/π)(x + 0.044715x³)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

#[inline]
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u2 = lit::<T>(2.0 * GELU_C) * (x + lit::<T>(GELU_A) * x * x * x);
    T::one() / (T::one() + (-u2).exp())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let du2 = lit::<T>(2.0 * GELU_C) * (T::one() + lit::<T>(3.0 * GELU_A) * x * x);
    s + x * s * (T::one() - s) * du2
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softplus<T: Scalar>(x: T) -> T {
    // log(1 + e^x) without overflow
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse<T: Scalar>(y: T) -> T {
    // x = log(e^y - 1)
    y + (-(-y).exp_m1()).ln()
}

/// 2x2 stride-2 max pooling over NCHW; returns output and flat argmax indices.
pub fn max_pool2_forward<T: Scalar>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics layout for NC[HW] tensors.
#[derive(Clone, Copy, Debug)]
pub struct ChannelLayout {
    pub n: usize,
    pub c: usize,
    pub inner: usize,
}

impl ChannelLayout {
    pub fn count(&self) -> usize {
        self.n * self.inner
    }

    fn for_channel<'a, T>(&self, data: &'a [T], ch: usize) -> impl Iterator<Item = &'a [T]> + 'a {
        let (c, inner) = (self.c, self.inner);
        (0..self.n).map(move |n| &data[(n * c + ch) * inner..(n * c + ch + 1) * inner])
    }
}

/// Batch statistics `(mean, biased variance)` per channel.
pub fn channel_moments<T: Scalar>(x: &[T], l: ChannelLayout) -> (Vec<T>, Vec<T>) {
    let cnt = lit::<T>(l.count() as f64);
    let mut mean = vec![T::zero(); l.c];
    let mut var = vec![T::zero(); l.c];
    for ch in 0..l.c {
        let s: T = l.for_channel(x, ch).flat_map(|s| s.iter().copied()).sum();
        let m = s / cnt;
        let v: T = l.for_channel(x, ch).flat_map(|s| s.iter()).map(|&v| (v - m) * (v - m)).sum();
        mean[ch] = m;
        var[ch] = v / cnt;
    }
    (mean, var)
}

/// Normalizes with given per-channel mean/inv_std, returning `(y, xhat)`.
pub fn channel_normalize<T: Scalar>(
    x: &[T],
    l: ChannelLayout,
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    for n in 0..l.n {
        for ch in 0..l.c {
            let off = (n * l.c + ch) * l.inner;
            for i in off..off + l.inner {
                let h = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                y[i] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, xhat)
}

/// Batch-norm backward. `batch_stats` selects the train-mode formula where
/// the statistics depend on `x`.
pub fn batch_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    l: ChannelLayout,
    gamma: &[T],
    inv_std: &[T],
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); l.c];
    let mut dbeta = vec![T::zero(); l.c];
    let cnt = lit::<T>(l.count() as f64);
    for ch in 0..l.c {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..l.n {
            let off = (n * l.c + ch) * l.inner;
            for i in off..off + l.inner {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * xhat[i];
            }
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * inv_std[ch];
        for n in 0..l.n {
            let off = (n * l.c + ch) * l.inner;
            for i in off..off + l.inner {
                dx[i] = if batch_stats {
                    k * (dy[i] - sum_dy / cnt - xhat[i] * sum_dy_xhat / cnt)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Layer norm over contiguous rows; returns `(y, xhat, inv_std per row)`.
pub fn layer_norm_forward<T: Scalar>(x: &[T], len: usize, gamma: &[T], beta: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / len;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv = vec![T::zero(); rows];
    let l = lit::<T>(len as f64);
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        let m = row.iter().copied().sum::<T>() / l;
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / l;
        let is = T::one() / (v + eps).sqrt();
        inv[r] = is;
        for i in 0..len {
            let h = (row[i] - m) * is;
            xhat[r * len + i] = h;
            y[r * len + i] = gamma[i] * h + beta[i];
        }
    }
    (y, xhat, inv)
}

pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    inv: &[T],
    gamma: &[T],
    len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = dy.len() / len;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); len];
    let mut dbeta = vec![T::zero(); len];
    let l = lit::<T>(len as f64);
    for r in 0..rows {
        let off = r * len;
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for i in 0..len {
            let g = dy[off + i] * gamma[i];
            s1 += g;
            s2 += g * xhat[off + i];
            dgamma[i] += dy[off + i] * xhat[off + i];
            dbeta[i] += dy[off + i];
        }
        for i in 0..len {
            let g = dy[off + i] * gamma[i];
            dx[off + i] = inv[r] * (g - s1 / l - xhat[off + i] * s2 / l);
        }
    }
    (dx, dgamma, dbeta)
}

/// Dimensions of a fused multi-head attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    /// Number of independent windows.
    pub windows: usize,
    /// Tokens per window.
    pub tokens: usize,
    /// Model width `C`; the packed qkv input has width `3C`.
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Scaled dot-product attention over packed `[windows, tokens, 3C]` input
/// with an additive per-head bias `[heads, tokens, tokens]`.
/// Returns `(out [windows, tokens, C], probs [windows, heads, tokens, tokens])`.
pub fn attention_forward<T: Scalar>(g: &AttnGeom, qkv: &[T], bias: &[T]) -> (Vec<T>, Vec<T>) {
    let (t, c, dh) = (g.tokens, g.dim, g.head_dim());
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let mut out = vec![T::zero(); g.windows * t * c];
    let mut probs = vec![T::zero(); g.windows * g.heads * t * t];
    let mut row = vec![T::zero(); t];
    for w in 0..g.windows {
        let base = w * t * 3 * c;
        for h in 0..g.heads {
            for i in 0..t {
                let q = &qkv[base + i * 3 * c + h * dh..base + i * 3 * c + (h + 1) * dh];
                for j in 0..t {
                    let k = &qkv[base + j * 3 * c + c + h * dh..base + j * 3 * c + c + (h + 1) * dh];
                    let dot: T = q.iter().zip(k).map(|(&a, &b)| a * b).sum();
                    row[j] = dot * scale + bias[(h * t + i) * t + j];
                }
                let p = softmax_rows(&row, t);
                let po = ((w * g.heads + h) * t + i) * t;
                probs[po..po + t].copy_from_slice(&p);
                let o = &mut out[(w * t + i) * c + h * dh..(w * t + i) * c + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    let v = &qkv[base + j * 3 * c + 2 * c + h * dh..base + j * 3 * c + 2 * c + (h + 1) * dh];
                    for d in 0..dh {
                        o[d] += pj * v[d];
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Returns `(dqkv, dbias)`.
pub fn attention_backward<T: Scalar>(g: &AttnGeom, qkv: &[T], probs: &[T], dout: &[T]) -> (Vec<T>, Vec<T>) {
    let (t, c, dh) = (g.tokens, g.dim, g.head_dim());
    let scale = T::one() / lit::<T>(dh as f64).sqrt();
    let mut dqkv = vec![T::zero(); qkv.len()];
    let mut dbias = vec![T::zero(); g.heads * t * t];
    let mut dp = vec![T::zero(); t];
    for w in 0..g.windows {
        let base = w * t * 3 * c;
        for h in 0..g.heads {
            for i in 0..t {
                let doi = &dout[(w * t + i) * c + h * dh..(w * t + i) * c + (h + 1) * dh];
                let po = ((w * g.heads + h) * t + i) * t;
                let p = &probs[po..po + t];
                for j in 0..t {
                    let vo = base + j * 3 * c + 2 * c + h * dh;
                    let mut acc = T::zero();
                    for d in 0..dh {
                        acc += doi[d] * qkv[vo + d];
                        dqkv[vo + d] += p[j] * doi[d];
                    }
                    dp[j] = acc;
                }
                let dot: T = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                let qo = base + i * 3 * c + h * dh;
                for j in 0..t {
                    let ds = p[j] * (dp[j] - dot);
                    dbias[(h * t + i) * t + j] += ds;
                    let ko = base + j * 3 * c + c + h * dh;
                    let s = ds * scale;
                    for d in 0..dh {
                        dqkv[qo + d] += s * qkv[ko + d];
                        dqkv[ko + d] += s * qkv[qo + d];
                    }
                }
            }
        }
    }
    (dqkv, dbias)
}

/// Floor applied before raising features to the pooling exponent.
pub const GEM_CLAMP: f64 = 1e-6;

/// Generalized-mean pooling over contiguous groups of `len` values.
pub fn gem_forward<T: Scalar>(x: &[T], len: usize, rho: T) -> Vec<T> {
    let floor = lit::<T>(GEM_CLAMP);
    let l = lit::<T>(len as f64);
    x.chunks(len)
        .map(|g| {
            let m = g.iter().map(|&v| v.max(floor).powf(rho)).sum::<T>() / l;
            m.powf(T::one() / rho)
        })
        .collect()
}

/// Returns `(dx, drho)` for upstream `dy` (one value per group).
pub fn gem_backward<T: Scalar>(x: &[T], len: usize, rho: T, y: &[T], dy: &[T]) -> (Vec<T>, T) {
    let floor = lit::<T>(GEM_CLAMP);
    let l = lit::<T>(len as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut drho = T::zero();
    for (gi, g) in x.chunks(len).enumerate() {
        let mut m = T::zero();
        let mut dm_drho = T::zero();
        for &v in g {
            let c = v.max(floor);
            let p = c.powf(rho);
            m += p;
            dm_drho += p * c.ln();
        }
        m /= l;
        dm_drho /= l;
        let yg = y[gi];
        // dy/dx_i = y / m * x_i^(rho-1) / len
        let k = dy[gi] * yg / (m * l);
        for (j, &v) in g.iter().enumerate() {
            if v > floor {
                dx[gi * len + j] = k * v.powf(rho - T::one());
            }
        }
        drho += dy[gi] * yg * (dm_drho / (m * rho) - m.ln() / (rho * rho));
    }
    (dx, drho)
}
