//! Forward and adjoint kernels on raw buffers. The tape owns bookkeeping;
//! everything here is plain array arithmetic.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shapes, broadcast_strides, numel, Tensor};

/// `c = op(a) * op(b) + beta * c` for row-major buffers, where `op(a)` is
/// `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths were checked above and the strides describe
    // in-bounds row-major (or transposed row-major) layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Shape bookkeeping for a (possibly batched) matrix product.
#[derive(Clone, Debug)]
pub(crate) struct MatmulDims {
    pub batch: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a_batch_strides: Vec<usize>,
    pub b_batch_strides: Vec<usize>,
    /// `b` is a single matrix shared by every batch entry of `a`, and `a`
    /// is not broadcast, so the product collapses into one large gemm.
    pub flat: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatmulDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Shape(format!("matmul needs rank >= 2, got {:?} and {:?}", a, b)));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::Shape(format!("matmul inner dimensions differ: {:?} x {:?}", a, b)));
    }
    let ab = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = broadcast_shapes(ab, bb)
        .map_err(|_| Error::Shape(format!("matmul batch dims do not broadcast: {:?} x {:?}", a, b)))?;
    let flat = numel(bb) == 1 && ab == batch.as_slice();
    Ok(MatmulDims {
        a_batch_strides: broadcast_strides(ab, &batch),
        b_batch_strides: broadcast_strides(bb, &batch),
        batch,
        m,
        k,
        n,
        flat,
    })
}

fn batch_offsets(d: &MatmulDims) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(numel(&d.batch));
    crate::tensor::for_each_offset2(&d.batch, &d.a_batch_strides, &d.b_batch_strides, |ia, ib| {
        out.push((ia, ib))
    });
    out
}

pub(crate) fn matmul_forward(a: &Tensor, b: &Tensor, d: &MatmulDims) -> Tensor {
    let mut shape = d.batch.clone();
    shape.extend([d.m, d.n]);
    let mut out = Tensor::zeros(&shape);
    let (m, k, n) = (d.m, d.k, d.n);
    if d.flat {
        let rows = numel(&d.batch) * m;
        gemm(rows, k, n, a.data(), false, b.data(), false, out.data_mut(), 0.0);
        return out;
    }
    for (i, (ia, ib)) in batch_offsets(d).into_iter().enumerate() {
        let am = &a.data()[ia * m * k..(ia + 1) * m * k];
        let bm = &b.data()[ib * k * n..(ib + 1) * k * n];
        let cm = &mut out.data_mut()[i * m * n..(i + 1) * m * n];
        gemm(m, k, n, am, false, bm, false, cm, 0.0);
    }
    out
}

pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    d: &MatmulDims,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut ga = need_a.then(|| Tensor::zeros(a.shape()));
    let mut gb = need_b.then(|| Tensor::zeros(b.shape()));
    if d.flat {
        let rows = numel(&d.batch) * m;
        if let Some(ga) = ga.as_mut() {
            gemm(rows, n, k, g.data(), false, b.data(), true, ga.data_mut(), 0.0);
        }
        if let Some(gb) = gb.as_mut() {
            gemm(k, rows, n, a.data(), true, g.data(), false, gb.data_mut(), 0.0);
        }
        return (ga, gb);
    }
    for (i, (ia, ib)) in batch_offsets(d).into_iter().enumerate() {
        let gm = &g.data()[i * m * n..(i + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            let bm = &b.data()[ib * k * n..(ib + 1) * k * n];
            let out = &mut ga.data_mut()[ia * m * k..(ia + 1) * m * k];
            gemm(m, n, k, gm, false, bm, true, out, 1.0);
        }
        if let Some(gb) = gb.as_mut() {
            let am = &a.data()[ia * m * k..(ia + 1) * m * k];
            let out = &mut gb.data_mut()[ib * k * n..(ib + 1) * k * n];
            gemm(k, m, n, am, true, gm, false, out, 1.0);
        }
    }
    (ga, gb)
}

/// Geometry of a 1-D convolution over `[batch, channels, length]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv1dSpec {
    pub stride: usize,
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub groups: usize,
}

impl Conv1dSpec {
    /// Zero padding that keeps the output length equal to the input length
    /// (stride 1, odd effective kernel).
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        let total = dilation * (kernel - 1);
        Self { stride: 1, dilation, pad_left: total / 2, pad_right: total - total / 2, groups }
    }

    pub fn valid() -> Self {
        Self { stride: 1, dilation: 1, pad_left: 0, pad_right: 0, groups: 1 }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub c_in_group: usize,
    pub kernel: usize,
    pub len_out: usize,
}

pub(crate) fn conv_dims(x: &[usize], w: &[usize], spec: &Conv1dSpec) -> Result<ConvDims> {
    if x.len() != 3 || w.len() != 3 {
        return Err(Error::Shape(format!("conv1d expects x [B,Cin,L] and w [Cout,Cin/g,K], got {:?} and {:?}", x, w)));
    }
    let (batch, c_in, len) = (x[0], x[1], x[2]);
    let (c_out, c_in_group, kernel) = (w[0], w[1], w[2]);
    let g = spec.groups;
    if g == 0 || c_in % g != 0 || c_out % g != 0 || c_in / g != c_in_group {
        return Err(Error::Shape(format!(
            "conv1d groups={} incompatible with x {:?} and w {:?}",
            g, x, w
        )));
    }
    if kernel == 0 || spec.dilation == 0 || spec.stride == 0 {
        return Err(Error::Shape("conv1d needs kernel, dilation and stride >= 1".into()));
    }
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = len + spec.pad_left + spec.pad_right;
    if padded < span {
        return Err(Error::InputTooShort(format!(
            "conv1d padded length {} shorter than receptive field {}",
            padded, span
        )));
    }
    let len_out = (padded - span) / spec.stride + 1;
    Ok(ConvDims { batch, c_in, len, c_out, c_in_group, kernel, len_out })
}

pub(crate) fn conv1d_forward(x: &Tensor, w: &Tensor, spec: &Conv1dSpec, d: &ConvDims) -> Tensor {
    let mut out = Tensor::zeros(&[d.batch, d.c_out, d.len_out]);
    let (xs, ws) = (x.data(), w.data());
    let o = out.data_mut();
    let c_out_group = d.c_out / spec.groups;
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let g = co / c_out_group;
            let orow = &mut o[(b * d.c_out + co) * d.len_out..][..d.len_out];
            for cl in 0..d.c_in_group {
                let ci = g * d.c_in_group + cl;
                let xrow = &xs[(b * d.c_in + ci) * d.len..][..d.len];
                let wrow = &ws[(co * d.c_in_group + cl) * d.kernel..][..d.kernel];
                for (kk, &wv) in wrow.iter().enumerate() {
                    let shift = (kk * spec.dilation) as isize - spec.pad_left as isize;
                    for (t, ov) in orow.iter_mut().enumerate() {
                        let pos = (t * spec.stride) as isize + shift;
                        if pos >= 0 && (pos as usize) < d.len {
                            *ov += wv * xrow[pos as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    spec: &Conv1dSpec,
    d: &ConvDims,
) -> (Tensor, Tensor) {
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let (xs, ws, gs) = (x.data(), w.data(), g.data());
    let c_out_group = d.c_out / spec.groups;
    let gxd = gx.data_mut();
    let gwd = gw.data_mut();
    for b in 0..d.batch {
        for co in 0..d.c_out {
            let grp = co / c_out_group;
            let grow = &gs[(b * d.c_out + co) * d.len_out..][..d.len_out];
            for cl in 0..d.c_in_group {
                let ci = grp * d.c_in_group + cl;
                let xoff = (b * d.c_in + ci) * d.len;
                let woff = (co * d.c_in_group + cl) * d.kernel;
                for kk in 0..d.kernel {
                    let shift = (kk * spec.dilation) as isize - spec.pad_left as isize;
                    let wv = ws[woff + kk];
                    let mut acc = 0.0;
                    for (t, &gv) in grow.iter().enumerate() {
                        let pos = (t * spec.stride) as isize + shift;
                        if pos >= 0 && (pos as usize) < d.len {
                            let p = xoff + pos as usize;
                            acc += gv * xs[p];
                            gxd[p] += gv * wv;
                        }
                    }
                    gwd[woff + kk] += acc;
                }
            }
        }
    }
    (gx, gw)
}

/// Split `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let o = out.data_mut();
    for a in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (a * len + j) * inner + i;
            let max = (0..len).map(|j| xs[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..len {
                let e = (xs[at(j)] - max).exp();
                o[at(j)] = e;
                sum += e;
            }
            for j in 0..len {
                o[at(j)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let mut gx = Tensor::zeros(y.shape());
    let (ys, gs) = (y.data(), g.data());
    let o = gx.data_mut();
    for a in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (a * len + j) * inner + i;
            let dot: f64 = (0..len).map(|j| ys[at(j)] * gs[at(j)]).sum();
            for j in 0..len {
                o[at(j)] = ys[at(j)] * (gs[at(j)] - dot);
            }
        }
    }
    gx
}

/// Normalizes over the last axis. Returns the output and per-row
/// reciprocal standard deviations for the adjoint.
pub(crate) fn layer_norm_forward(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let d = *x.shape().last().expect("layer_norm on scalar");
    let rows = x.len() / d;
    let mut out = Tensor::zeros(x.shape());
    let mut rstd = Vec::with_capacity(rows);
    for (xr, orow) in x.data().chunks_exact(d).zip(out.data_mut().chunks_exact_mut(d)) {
        let mean = xr.iter().sum::<f64>() / d as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps).sqrt();
        for (o, &v) in orow.iter_mut().zip(xr) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    (out, rstd)
}

pub(crate) fn layer_norm_backward(y: &Tensor, rstd: &[f64], g: &Tensor) -> Tensor {
    let d = *y.shape().last().unwrap();
    let mut gx = Tensor::zeros(y.shape());
    for (((yr, gr), orow), &r) in y
        .data()
        .chunks_exact(d)
        .zip(g.data().chunks_exact(d))
        .zip(gx.data_mut().chunks_exact_mut(d))
        .zip(rstd)
    {
        let mean_g = gr.iter().sum::<f64>() / d as f64;
        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        for ((o, &gv), &yv) in orow.iter_mut().zip(gr).zip(yr) {
            *o = r * (gv - mean_g - yv * mean_gy);
        }
    }
    gx
}

/// Sliding windows of `size` with step `step` along the last axis.
pub(crate) fn unfold_forward(x: &Tensor, size: usize, step: usize, count: usize) -> Tensor {
    let len = *x.shape().last().unwrap();
    let rows = x.len() / len;
    let mut shape = x.shape()[..x.ndim() - 1].to_vec();
    shape.extend([count, size]);
    let mut out = Tensor::zeros(&shape);
    for (xr, orow) in x.data().chunks_exact(len).zip(out.data_mut().chunks_exact_mut(count * size)) {
        for (i, patch) in orow.chunks_exact_mut(size).enumerate() {
            patch.copy_from_slice(&xr[i * step..i * step + size]);
        }
    }
    debug_assert_eq!(rows * count * size, out.len());
    out
}

/// Adjoint of `unfold_forward`: fold patches back with overlap-add.
pub(crate) fn unfold_backward(g: &Tensor, in_shape: &[usize], size: usize, step: usize, count: usize) -> Tensor {
    let len = *in_shape.last().unwrap();
    let mut gx = Tensor::zeros(in_shape);
    for (grow, xrow) in g.data().chunks_exact(count * size).zip(gx.data_mut().chunks_exact_mut(len)) {
        for (i, patch) in grow.chunks_exact(size).enumerate() {
            for (dst, &v) in xrow[i * step..i * step + size].iter_mut().zip(patch) {
                *dst += v;
            }
        }
    }
    gx
}

pub(crate) fn pad_replicate_right_forward(x: &Tensor, n: usize) -> Tensor {
    let len = *x.shape().last().unwrap();
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len + n;
    let mut out = Tensor::zeros(&shape);
    for (xr, orow) in x.data().chunks_exact(len).zip(out.data_mut().chunks_exact_mut(len + n)) {
        orow[..len].copy_from_slice(xr);
        let last = xr[len - 1];
        orow[len..].iter_mut().for_each(|v| *v = last);
    }
    out
}

pub(crate) fn pad_replicate_right_backward(g: &Tensor, in_shape: &[usize], n: usize) -> Tensor {
    let len = *in_shape.last().unwrap();
    let mut gx = Tensor::zeros(in_shape);
    for (grow, xrow) in g.data().chunks_exact(len + n).zip(gx.data_mut().chunks_exact_mut(len)) {
        xrow.copy_from_slice(&grow[..len]);
        xrow[len - 1] += grow[len..].iter().sum::<f64>();
    }
    gx
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise binary op with broadcasting.
pub(crate) fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::new(a.shape(), data);
    }
    let shape = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &shape);
    let sb = broadcast_strides(b.shape(), &shape);
    let mut data = Vec::with_capacity(numel(&shape));
    let (ad, bd) = (a.data(), b.data());
    crate::tensor::for_each_offset2(&shape, &sa, &sb, |ia, ib| data.push(f(ad[ia], bd[ib])));
    Tensor::new(&shape, data)
}
