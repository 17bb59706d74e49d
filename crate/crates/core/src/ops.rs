//! Forward kernels and their adjoints over plain tensors.
//!
//! Every reduction runs in a fixed order so that repeated evaluation is
//! bit-identical. Convolution is lowered to a matrix product through im2col;
//! the lowered product accumulates over `(c_in, kh, kw)` in the same order as a
//! direct nested loop, so in `f64` the two agree exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    Max,
    Avg,
}

/// `c[m,n] += a[m,k] * b[k,n]`, accumulating over `k` in ascending order.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, &b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij = *c_ij + a_ip * b_pj;
            }
        }
    }
}

fn transpose_raw<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2()?;
    Tensor::new(&[n, m], transpose_raw(a.data(), m, n))
}

/// Output extent of a sliding window along one axis.
pub fn window_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(arg_err!("stride must be >= 1"));
    }
    if kernel == 0 {
        return Err(arg_err!("window size must be >= 1"));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(dim_err!(
            "window {} larger than padded extent {} (input {}, padding {})",
            kernel,
            padded,
            input,
            padding
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<(usize, Self)> {
        let (n, c_in, h, w) = input.dims4()?;
        let (c_out, kc, kh, kw) = kernel.dims4()?;
        if kc != c_in {
            return Err(dim_err!(
                "conv2d: input has {} channels but kernel expects {}",
                c_in,
                kc
            ));
        }
        let oh = window_extent(h, kh, stride, padding)?;
        let ow = window_extent(w, kw, stride, padding)?;
        Ok((
            n,
            Self {
                c_in,
                h,
                w,
                c_out,
                kh,
                kw,
                oh,
                ow,
                stride,
                padding,
            },
        ))
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the image already is its own column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.padding as isize;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + j) as isize - self.padding as isize;
                            dst[oy * self.ow + ox] = if iy >= 0
                                && (iy as usize) < self.h
                                && ix >= 0
                                && (ix as usize) < self.w
                            {
                                x[(ci * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], x: &mut [T]) {
        let p = self.positions();
        for ci in 0..self.c_in {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (ci * self.kh + i) * self.kw + j;
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + i) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + j) as isize - self.padding as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let dst = &mut x[(ci * self.h + iy as usize) * self.w + ix as usize];
                            *dst = *dst + src[oy * self.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, `[N,C_in,H,W] * [C_out,C_in,kH,kW]`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let (n, g) = ConvGeom::new(input, kernel, stride, padding)?;
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let mut out = vec![T::zero(); n * g.c_out * p];
    out.par_chunks_mut(g.c_out * p)
        .zip(input.data().par_chunks(in_len))
        .for_each_init(
            || vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }],
            |col, (out_n, x_n)| {
                if g.is_pointwise() {
                    gemm_acc(kernel.data(), x_n, out_n, g.c_out, k, p);
                } else {
                    g.im2col(x_n, col);
                    gemm_acc(kernel.data(), col, out_n, g.c_out, k, p);
                }
            },
        );
    Tensor::new(&[n, g.c_out, g.oh, g.ow], out)
}

/// Adjoints of [`conv2d`]. The input gradient is skipped when `need_input` is false.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>)> {
    let (n, g) = ConvGeom::new(input, kernel, stride, padding)?;
    if grad_out.shape() != [n, g.c_out, g.oh, g.ow] {
        return Err(dim_err!(
            "conv2d backward: grad shape {:?} does not match output",
            grad_out.shape()
        ));
    }
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;

    // kernel gradient: sequential over (sample, position) so the result does
    // not depend on the thread count
    let mut grad_k = vec![T::zero(); g.c_out * k];
    let mut col = vec![T::zero(); k * p];
    for (x_n, go_n) in input.data().chunks(in_len).zip(grad_out.data().chunks(out_len)) {
        let col_t = if g.is_pointwise() {
            transpose_raw(x_n, k, p)
        } else {
            g.im2col(x_n, &mut col);
            transpose_raw(&col, k, p)
        };
        gemm_acc(go_n, &col_t, &mut grad_k, g.c_out, p, k);
    }
    let grad_kernel = Tensor::new(kernel.shape(), grad_k)?;

    let grad_input = if need_input {
        let w_t = transpose_raw(kernel.data(), g.c_out, k);
        let mut gi = vec![T::zero(); n * in_len];
        gi.par_chunks_mut(in_len)
            .zip(grad_out.data().par_chunks(out_len))
            .for_each_init(
                || vec![T::zero(); if g.is_pointwise() { 0 } else { k * p }],
                |dcol, (gi_n, go_n)| {
                    if g.is_pointwise() {
                        gemm_acc(&w_t, go_n, gi_n, k, g.c_out, p);
                    } else {
                        dcol.iter_mut().for_each(|v| *v = T::zero());
                        gemm_acc(&w_t, go_n, dcol, k, g.c_out, p);
                        g.col2im(dcol, gi_n);
                    }
                },
            );
        Some(Tensor::new(input.shape(), gi)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernel))
}

/// Result of a max-type reduction: values plus the flat input index that won
/// each output cell (needed by the adjoint).
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

/// Windowed pooling. Padding cells are ignored by max; avg always divides by
/// the full window `k*k`, counting padded cells as zeros.
pub fn pool2d<T: Scalar>(
    input: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Pooled<T>> {
    let (n, c, h, w) = input.dims4()?;
    if 2 * padding > k {
        return Err(arg_err!("pool padding {} exceeds half the window {}", padding, k));
    }
    let oh = window_extent(h, k, stride, padding)?;
    let ow = window_extent(w, k, stride, padding)?;
    let x = input.data();
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut argmax = match kind {
        PoolKind::Max => vec![0usize; out.len()],
        PoolKind::Avg => Vec::new(),
    };
    let inv_area = T::one() / T::from_f64((k * k) as f64);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let o = (plane * oh + oy) * ow + ox;
                let y0 = (oy * stride) as isize - padding as isize;
                let x0 = (ox * stride) as isize - padding as isize;
                let mut best = T::neg_infinity();
                let mut best_at = usize::MAX;
                let mut acc = T::zero();
                for dy in 0..k as isize {
                    let iy = y0 + dy;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for dx in 0..k as isize {
                        let ix = x0 + dx;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        let v = x[idx];
                        match kind {
                            PoolKind::Max => {
                                if best_at == usize::MAX || v > best {
                                    best = v;
                                    best_at = idx;
                                }
                            }
                            PoolKind::Avg => acc = acc + v,
                        }
                    }
                }
                match kind {
                    PoolKind::Max => {
                        out[o] = best;
                        argmax[o] = best_at;
                    }
                    PoolKind::Avg => out[o] = acc * inv_area,
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(&[n, c, oh, ow], out)?,
        argmax: (kind == PoolKind::Max).then_some(argmax),
    })
}

pub fn pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    padding: usize,
    argmax: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut gi = Tensor::zeros(input_shape);
    let g = grad_out.data();
    match (kind, argmax) {
        (PoolKind::Max, Some(argmax)) => {
            let buf = gi.data_mut();
            for (&src, &at) in g.iter().zip(argmax) {
                buf[at] = buf[at] + src;
            }
        }
        (PoolKind::Max, None) => return Err(arg_err!("max pool adjoint needs argmax indices")),
        (PoolKind::Avg, _) => {
            let (n, c, h, w) = gi.dims4()?;
            let (_, _, oh, ow) = grad_out.dims4()?;
            let inv_area = T::one() / T::from_f64((k * k) as f64);
            let buf = gi.data_mut();
            for plane in 0..n * c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let share = g[(plane * oh + oy) * ow + ox] * inv_area;
                        let y0 = (oy * stride) as isize - padding as isize;
                        let x0 = (ox * stride) as isize - padding as isize;
                        for dy in 0..k as isize {
                            let iy = y0 + dy;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for dx in 0..k as isize {
                                let ix = x0 + dx;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let idx = (plane * h + iy as usize) * w + ix as usize;
                                buf[idx] = buf[idx] + share;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gi)
}

/// Per-channel reduction over the whole `H x W` plane, giving `[N,C,1,1]`.
pub fn global_pool<T: Scalar>(input: &Tensor<T>, kind: PoolKind) -> Result<Pooled<T>> {
    let (n, c, h, w) = input.dims4()?;
    let area = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::new();
    for (plane, values) in input.data().chunks(area).enumerate() {
        match kind {
            PoolKind::Avg => {
                let total = values.iter().fold(T::zero(), |acc, &v| acc + v);
                out.push(total / T::from_f64(area as f64));
            }
            PoolKind::Max => {
                let (at, best) = first_max(values);
                out.push(best);
                argmax.push(plane * area + at);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(&[n, c, 1, 1], out)?,
        argmax: (kind == PoolKind::Max).then_some(argmax),
    })
}

pub fn global_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    kind: PoolKind,
    argmax: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut gi = Tensor::zeros(input_shape);
    let (_, _, h, w) = gi.dims4()?;
    let area = h * w;
    let g = grad_out.data();
    let buf = gi.data_mut();
    match kind {
        PoolKind::Avg => {
            let inv = T::one() / T::from_f64(area as f64);
            for (plane, chunk) in buf.chunks_mut(area).enumerate() {
                let share = g[plane] * inv;
                chunk.iter_mut().for_each(|v| *v = share);
            }
        }
        PoolKind::Max => {
            let argmax = argmax.ok_or_else(|| arg_err!("global max adjoint needs argmax indices"))?;
            for (&src, &at) in g.iter().zip(argmax) {
                buf[at] = buf[at] + src;
            }
        }
    }
    Ok(gi)
}

/// Reduction across channels at every pixel, giving `[N,1,H,W]`.
pub fn channel_pool<T: Scalar>(input: &Tensor<T>, kind: PoolKind) -> Result<Pooled<T>> {
    let (n, c, h, w) = input.dims4()?;
    let area = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); n * area];
    let mut argmax = match kind {
        PoolKind::Max => vec![0usize; n * area],
        PoolKind::Avg => Vec::new(),
    };
    let inv_c = T::one() / T::from_f64(c as f64);
    for s in 0..n {
        for px in 0..area {
            let o = s * area + px;
            match kind {
                PoolKind::Avg => {
                    let mut acc = T::zero();
                    for ch in 0..c {
                        acc = acc + x[(s * c + ch) * area + px];
                    }
                    out[o] = acc * inv_c;
                }
                PoolKind::Max => {
                    let mut best_at = s * c * area + px;
                    let mut best = x[best_at];
                    for ch in 1..c {
                        let idx = (s * c + ch) * area + px;
                        if x[idx] > best {
                            best = x[idx];
                            best_at = idx;
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_at;
                }
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(&[n, 1, h, w], out)?,
        argmax: (kind == PoolKind::Max).then_some(argmax),
    })
}

pub fn channel_pool_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    kind: PoolKind,
    argmax: Option<&[usize]>,
) -> Result<Tensor<T>> {
    let mut gi = Tensor::zeros(input_shape);
    let (n, c, h, w) = gi.dims4()?;
    let area = h * w;
    let g = grad_out.data();
    let buf = gi.data_mut();
    match kind {
        PoolKind::Avg => {
            let inv_c = T::one() / T::from_f64(c as f64);
            for s in 0..n {
                for ch in 0..c {
                    for px in 0..area {
                        buf[(s * c + ch) * area + px] = g[s * area + px] * inv_c;
                    }
                }
            }
        }
        PoolKind::Max => {
            let argmax = argmax.ok_or_else(|| arg_err!("channel max adjoint needs argmax indices"))?;
            for (&src, &at) in g.iter().zip(argmax) {
                buf[at] = buf[at] + src;
            }
        }
    }
    Ok(gi)
}

fn first_max<T: Scalar>(values: &[T]) -> (usize, T) {
    let mut at = 0;
    let mut best = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            at = i;
        }
    }
    (at, best)
}

/// Concatenates rank-4 tensors along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| arg_err!("concat of zero tensors"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut channels = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(dim_err!(
                "concat: {:?} incompatible with {:?}",
                p.shape(),
                first.shape()
            ));
        }
        channels += pc;
    }
    let mut out = Vec::with_capacity(n * channels * h * w);
    for s in 0..n {
        for p in parts {
            let per = p.shape()[1] * h * w;
            out.extend_from_slice(&p.data()[s * per..(s + 1) * per]);
        }
    }
    Tensor::new(&[n, channels, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-part gradients.
pub fn split_channels<T: Scalar>(grad: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = grad.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(dim_err!("split sizes {:?} do not sum to {}", channels, c));
    }
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * h * w)).collect();
    let g = grad.data();
    for s in 0..n {
        let mut offset = s * c * h * w;
        for (part, &pc) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&g[offset..offset + pc * h * w]);
            offset += pc * h * w;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &pc)| Tensor::new(&[n, pc, h, w], data))
        .collect()
}

/// Same-rank broadcast: each extent pair must match or one side must be 1.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(dim_err!("cannot broadcast {:?} with {:?}: rank differs", a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(dim_err!("cannot broadcast {:?} with {:?}", a, b)),
        })
        .collect()
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every output element in row-major order with the matching flat
/// offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for _ in 0..total {
        f(ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub fn broadcast_binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for_each_broadcast(&out_shape, &sa, &sb, |ia, ib| out.push(f(da[ia], db[ib])));
    Tensor::new(&out_shape, out)
}

/// Sums a broadcast gradient back down to `shape`.
pub fn sum_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == shape {
        return Ok(grad.clone());
    }
    let out_shape = grad.shape().to_vec();
    if broadcast_shape(shape, &out_shape)? != out_shape {
        return Err(dim_err!("cannot reduce {:?} to {:?}", out_shape, shape));
    }
    let identity = broadcast_strides(&out_shape, &out_shape);
    let reduced = broadcast_strides(shape, &out_shape);
    let mut out = Tensor::zeros(shape);
    let g = grad.data();
    let buf = out.data_mut();
    for_each_broadcast(&out_shape, &identity, &reduced, |ig, io| buf[io] = buf[io] + g[ig]);
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // split on sign so exp never overflows
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax of `[N,K]` logits with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2()?;
    if k < 2 {
        return Err(arg_err!("softmax needs at least 2 classes, got {}", k));
    }
    let mut out = Vec::with_capacity(n * k);
    for row in logits.data().chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
        let total = exps.iter().fold(T::zero(), |a, &b| a + b);
        out.extend(exps.into_iter().map(|e| e / total));
    }
    Tensor::new(&[n, k], out)
}

/// Row-wise `log(sum(exp(row)))`, stable for large magnitudes.
pub fn log_sum_exp_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<T>> {
    let (_, k) = logits.dims2()?;
    Ok(logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let total = row.iter().fold(T::zero(), |a, &v| a + (v - m).exp());
            m + total.ln()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64s(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let k = t(&[1, 1, 1, 1], &[1.]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn conv_window_sum() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.]);
    }

    #[test]
    fn conv_errors() {
        let x = Tensor::<f64>::ones(&[1, 2, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(crate::Error::Dimension(_))));
        let k = Tensor::<f64>::ones(&[1, 2, 1, 1]);
        assert!(matches!(conv2d(&x, &k, 0, 0), Err(crate::Error::Argument(_))));
        let k = Tensor::<f64>::ones(&[1, 2, 5, 5]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn pool_examples() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let avg = pool2d(&x, PoolKind::Avg, 2, 2, 0).unwrap();
        assert_eq!(avg.output.data(), &[2.5]);
        let max = pool2d(&x, PoolKind::Max, 2, 2, 0).unwrap();
        assert_eq!(max.output.data(), &[4.]);
        assert!(pool2d(&x, PoolKind::Max, 3, 1, 0).is_err());
    }

    #[test]
    fn avg_pool_counts_padding_in_divisor() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let y = pool2d(&x, PoolKind::Avg, 3, 2, 1).unwrap().output;
        // corner window sees 4 real ones out of 9 cells
        assert_eq!(y.data(), &[4.0 / 9.0]);
    }

    #[test]
    fn global_pool_examples() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(global_pool(&x, PoolKind::Avg).unwrap().output.data(), &[2.5]);
        assert_eq!(global_pool(&x, PoolKind::Max).unwrap().output.data(), &[4.]);
        let c = Tensor::<f64>::full(&[2, 3, 4, 5], 7.0);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            assert!(global_pool(&c, kind).unwrap().output.data().iter().all(|&v| v == 7.0));
        }
    }

    #[test]
    fn matmul_examples() {
        let i2 = t(&[2, 2], &[1., 0., 0., 1.]);
        let b = t(&[2, 2], &[5., 6., 7., 8.]);
        assert_eq!(matmul(&i2, &b).unwrap(), b);
        let dot = matmul(&t(&[1, 2], &[1., 2.]), &t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(dot.data(), &[11.]);
        assert!(matmul(&i2, &t(&[3, 1], &[1., 2., 3.])).is_err());
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(sigmoid(&t(&[1], &[0.])).data(), &[0.5]);
        assert_eq!(relu(&t(&[3], &[-1., 0., 2.])).data(), &[0., 0., 2.]);
        let w = t(&[1, 3, 1, 1], &[0.5, 1., 2.]);
        let ones = Tensor::<f64>::ones(&[1, 3, 2, 2]);
        let y = broadcast_binary(&ones, &w, |a, b| a * b).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, 1., 1., 1., 1., 2., 2., 2., 2.]);
        assert!(broadcast_binary(&ones, &t(&[1, 2, 1, 1], &[1., 1.]), |a, b| a * b).is_err());
    }

    #[test]
    fn sum_to_shape_reverses_broadcast() {
        let g = Tensor::<f64>::ones(&[2, 3, 2, 2]);
        let r = sum_to_shape(&g, &[1, 3, 1, 1]).unwrap();
        assert_eq!(r.data(), &[8., 8., 8.]);
        let r = sum_to_shape(&g, &[2, 1, 2, 2]).unwrap();
        assert!(r.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax(&t(&[1, 3], &[0., 0., 0.])).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&t(&[1, 2], &[1000., 0.])).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-300);
        assert!(softmax(&t(&[1, 1], &[0.])).is_err());
    }

    #[test]
    fn concat_then_split_is_identity() {
        let a = t(&[2, 1, 1, 2], &[1., 2., 3., 4.]);
        let b = t(&[2, 2, 1, 2], &[5., 6., 7., 8., 9., 10., 11., 12.]);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]);
        let parts = split_channels(&c, &[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
