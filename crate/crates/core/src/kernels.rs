//! Forward and adjoint numeric kernels on raw tensors. No graph bookkeeping
//! happens here; [`crate::autograd`] wires these into differentiable ops.

use std::borrow::Cow;

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Max,
}

impl BinaryOp {
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            Self::Add => a + b,
            Self::Sub => a - b,
            Self::Mul => a * b,
            Self::Max => {
                if a >= b {
                    a
                } else {
                    b
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Add => "add",
            Self::Sub => "sub",
            Self::Mul => "mul",
            Self::Max => "max",
        }
    }
}

/// Strides for reading `b` while iterating over `a`'s index space.
///
/// `b` broadcasts over `a` when, after left-padding `b`'s shape with ones to
/// `a`'s rank, every axis of `b` either equals `a`'s or is 1. Broadcast axes
/// get stride 0. The result always has `a`'s shape.
pub fn broadcast_strides(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if b.len() > a.len() {
        return Err(mismatch());
    }
    let lead = a.len() - b.len();
    let mut strides = vec![0; a.len()];
    let mut stride = 1;
    for axis in (0..a.len()).rev() {
        let extent = if axis < lead { 1 } else { b[axis - lead] };
        if extent == a[axis] {
            strides[axis] = if extent == 1 { 0 } else { stride };
        } else if extent == 1 {
            strides[axis] = 0;
        } else {
            return Err(mismatch());
        }
        stride *= extent;
    }
    Ok(strides)
}

/// Offsets into `b` for every flat position of `a`.
fn broadcast_offsets(a: &[usize], strides: &[usize]) -> Vec<usize> {
    let total: usize = a.iter().product();
    let mut offsets = Vec::with_capacity(total);
    let mut index = vec![0usize; a.len()];
    let mut offset = 0usize;
    for _ in 0..total {
        offsets.push(offset);
        for axis in (0..a.len()).rev() {
            index[axis] += 1;
            offset += strides[axis];
            if index[axis] < a[axis] {
                break;
            }
            offset -= strides[axis] * index[axis];
            index[axis] = 0;
        }
    }
    offsets
}

pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| op.apply(x, y))
            .collect();
        return Tensor::new(a.shape(), data);
    }
    let strides = broadcast_strides(op.name(), a.shape(), b.shape())?;
    let offsets = broadcast_offsets(a.shape(), &strides);
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .zip(&offsets)
        .map(|(&x, &o)| op.apply(x, bd[o]))
        .collect();
    Tensor::new(a.shape(), data)
}

/// Sum a gradient of shape `a` down to the broadcast operand's shape.
pub fn reduce_to<T: Scalar>(grad: &Tensor<T>, b_shape: &[usize]) -> Result<Tensor<T>> {
    if grad.shape() == b_shape {
        return Ok(grad.clone());
    }
    let strides = broadcast_strides("reduce", grad.shape(), b_shape)?;
    let offsets = broadcast_offsets(grad.shape(), &strides);
    let mut out = Tensor::zeros(b_shape);
    let od = out.data_mut();
    for (&g, &o) in grad.data().iter().zip(&offsets) {
        od[o] = od[o] + g;
    }
    Ok(out)
}

/// Value of `b` seen at each position of `a` (broadcast expanded).
pub fn expand_to<T: Scalar>(b: &Tensor<T>, a_shape: &[usize]) -> Result<Tensor<T>> {
    if b.shape() == a_shape {
        return Ok(b.clone());
    }
    let strides = broadcast_strides("expand", a_shape, b.shape())?;
    let offsets = broadcast_offsets(a_shape, &strides);
    Tensor::new(a_shape, offsets.iter().map(|&o| b.data()[o]).collect())
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`.
pub fn gemm_tn<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += a · bᵀ` with `a` stored `m×k` and `b` stored `n×k`.
pub fn gemm_nt<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(arow, brow);
        }
    }
}

/// Dot product with eight independent partial sums (fixed order, so results
/// are reproducible).
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail = tail + a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = match a.shape() {
        &[m, k] => (m, k),
        s => return Err(invalid("matmul", format!("lhs must be rank 2, got {s:?}"))),
    };
    let n = match b.shape() {
        &[kb, n] if kb == k => n,
        _ => {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            })
        }
    };
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), out.data_mut());
    Ok(out)
}

pub fn transpose2<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    Tensor::from_fn(&[n, m], |i| a.data()[(i % m) * n + i / m])
}

/// Output extent of a sliding window.
pub fn window_out(op: &'static str, extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k == 0 || stride == 0 {
        return Err(invalid(op, "kernel and stride must be positive"));
    }
    if extent + 2 * pad < k {
        return Err(invalid(
            op,
            format!("kernel {k} larger than padded extent {}", extent + 2 * pad),
        ));
    }
    Ok((extent + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn new(op: &'static str, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: window_out(op, h, k, stride, pad)?,
            ow: window_out(op, w, k, stride, pad)?,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source coordinate for output `o` and kernel tap `t`, if in bounds.
    fn src(o: usize, t: usize, stride: usize, pad: usize, extent: usize) -> Option<usize> {
        (o * stride + t).checked_sub(pad).filter(|&i| i < extent)
    }

    /// Fill columns `offset..offset + positions` of a row-major matrix with
    /// `ld` columns from one `(C, H, W)` sample.
    fn gather<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, offset: usize) {
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * ld + offset..row * ld + offset + self.positions()];
                    for oy in 0..self.oh {
                        let line = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        match Self::src(oy, ky, self.stride, self.pad, self.h) {
                            Some(iy) => {
                                for (ox, slot) in line.iter_mut().enumerate() {
                                    *slot = match Self::src(ox, kx, self.stride, self.pad, self.w) {
                                        Some(ix) => plane[iy * self.w + ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                            None => line.fill(T::zero()),
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::gather`]: accumulate columns back into a sample.
    fn scatter<T: Scalar>(&self, cols: &[T], ld: usize, offset: usize, x: &mut [T]) {
        for c in 0..self.c {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &cols[row * ld + offset..row * ld + offset + self.positions()];
                    for oy in 0..self.oh {
                        let Some(iy) = Self::src(oy, ky, self.stride, self.pad, self.h) else {
                            continue;
                        };
                        for ox in 0..self.ow {
                            if let Some(ix) = Self::src(ox, kx, self.stride, self.pad, self.w) {
                                let v = &mut plane[iy * self.w + ix];
                                *v = *v + src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfold receptive fields into a `(C·k·k) × (N·H_out·W_out)` matrix.
///
/// Row `(c·k + ky)·k + kx`, column `(n·H_out + oy)·W_out + ox`; taps outside
/// the input read as zero.
pub fn im2col<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let win = Window::new("im2col", c, h, w, k, stride, pad)?;
    let ld = n * win.positions();
    let mut cols = Tensor::zeros(&[win.rows(), ld]);
    let sample = c * h * w;
    for i in 0..n {
        win.gather(&x.data()[i * sample..(i + 1) * sample], cols.data_mut(), ld, i * win.positions());
    }
    Ok(cols)
}

/// Adjoint of [`im2col`]; overlapping taps accumulate.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    x_shape: &[usize],
    k: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = x_shape else {
        return Err(invalid("col2im", format!("expected rank-4 shape, got {x_shape:?}")));
    };
    let win = Window::new("col2im", c, h, w, k, stride, pad)?;
    let ld = n * win.positions();
    if cols.shape() != [win.rows(), ld] {
        return Err(Error::ShapeMismatch {
            op: "col2im",
            lhs: cols.shape().to_vec(),
            rhs: vec![win.rows(), ld],
        });
    }
    let mut x = Tensor::zeros(x_shape);
    let sample = c * h * w;
    for i in 0..n {
        win.scatter(cols.data(), ld, i * win.positions(), &mut x.data_mut()[i * sample..(i + 1) * sample]);
    }
    Ok(x)
}

fn sample_cols<'a, T: Scalar>(win: &Window, x: &'a [T]) -> Cow<'a, [T]> {
    if win.is_pointwise() {
        Cow::Borrowed(x)
    } else {
        let mut cols = vec![T::zero(); win.rows() * win.positions()];
        win.gather(x, &mut cols, win.positions(), 0);
        Cow::Owned(cols)
    }
}

fn conv_window<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<(Window, usize)> {
    let (_, c, h, w) = x.dims4()?;
    let (o, ci, kh, kw) = weight.dims4()?;
    if ci != c || kh != kw {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    Ok((Window::new("conv2d", c, h, w, kh, stride, pad)?, o))
}

/// Cross-correlation of `x[N,C,H,W]` with `weight[O,C,k,k]` plus optional bias,
/// realized per sample as `weight (O × Ckk) · im2col(sample)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (win, o) = conv_window(x, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: b.shape().to_vec(),
                rhs: vec![o],
            });
        }
    }
    let n = x.shape()[0];
    let (sample, positions) = (win.c * win.h * win.w, win.positions());
    let mut out = Tensor::zeros(&[n, o, win.oh, win.ow]);
    for i in 0..n {
        let cols = sample_cols(&win, &x.data()[i * sample..(i + 1) * sample]);
        let dst = &mut out.data_mut()[i * o * positions..(i + 1) * o * positions];
        if let Some(b) = bias {
            for (row, &bv) in dst.chunks_mut(positions).zip(b.data()) {
                row.fill(bv);
            }
        }
        gemm_nn(o, win.rows(), positions, weight.data(), &cols, dst);
    }
    Ok(out)
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (win, o) = conv_window(x, weight, stride, pad)?;
    let n = x.shape()[0];
    let (sample, positions, rows) = (win.c * win.h * win.w, win.positions(), win.rows());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut dcols = vec![T::zero(); rows * positions];
    for i in 0..n {
        let gy = &grad_out.data()[i * o * positions..(i + 1) * o * positions];
        for (d, row) in db.data_mut().iter_mut().zip(gy.chunks(positions)) {
            *d = *d + row.iter().copied().sum();
        }
        let cols = sample_cols(&win, &x.data()[i * sample..(i + 1) * sample]);
        gemm_nt(o, positions, rows, gy, &cols, dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[i * sample..(i + 1) * sample];
            if win.is_pointwise() {
                gemm_tn(rows, o, positions, weight.data(), gy, dst);
            } else {
                dcols.fill(T::zero());
                gemm_tn(rows, o, positions, weight.data(), gy, &mut dcols);
                win.scatter(&dcols, positions, 0, dst);
            }
        }
    }
    Ok(ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    })
}

fn depthwise_check<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize)> {
    let (_, c, _, _) = x.dims4()?;
    let (wc, one, kh, kw) = weight.dims4()?;
    if wc != c || one != 1 || kh != kw || kh % 2 == 0 || bias.shape() != [c] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv2d",
            lhs: x.shape().to_vec(),
            rhs: weight.shape().to_vec(),
        });
    }
    Ok((kh, (kh - 1) / 2))
}

/// Valid output range `[lo, hi)` for a tap offset `t - pad` over extent `n`.
fn tap_range(n: usize, t: usize, pad: usize) -> (usize, usize, isize) {
    let shift = t as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = ((n as isize) - shift).min(n as isize).max(0) as usize;
    (lo, hi.max(lo), shift)
}

/// Per-channel "same" convolution with weight `[C,1,k,k]` (k odd) and bias `[C]`.
pub fn depthwise_conv2d<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, pad) = depthwise_check(x, weight, bias)?;
    let (n, c, h, w) = x.dims4()?;
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for i in 0..n {
        for ch in 0..c {
            let src = &x.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            let dst = &mut out.data_mut()[(i * c + ch) * plane..(i * c + ch + 1) * plane];
            dst.fill(bias.data()[ch]);
            let taps = &weight.data()[ch * k * k..(ch + 1) * k * k];
            for ky in 0..k {
                let (ylo, yhi, dy) = tap_range(h, ky, pad);
                for kx in 0..k {
                    let (xlo, xhi, dx) = tap_range(w, kx, pad);
                    let wv = taps[ky * k + kx];
                    for oy in ylo..yhi {
                        let iy = (oy as isize + dy) as usize;
                        let srow = &src[iy * w..(iy + 1) * w];
                        let drow = &mut dst[oy * w..(oy + 1) * w];
                        for ox in xlo..xhi {
                            let ix = (ox as isize + dx) as usize;
                            drow[ox] = drow[ox] + wv * srow[ix];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (k, pad) = depthwise_check(x, weight, bias)?;
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[c]);
    for i in 0..n {
        for ch in 0..c {
            let range = (i * c + ch) * plane..(i * c + ch + 1) * plane;
            let src = &x.data()[range.clone()];
            let gy = &grad_out.data()[range.clone()];
            db.data_mut()[ch] = db.data()[ch] + gy.iter().copied().sum();
            let gx = &mut dx.data_mut()[range];
            for ky in 0..k {
                let (ylo, yhi, dy) = tap_range(h, ky, pad);
                for kx in 0..k {
                    let (xlo, xhi, dxs) = tap_range(w, kx, pad);
                    let wv = weight.data()[ch * k * k + ky * k + kx];
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = (oy as isize + dy) as usize;
                        let ixlo = (xlo as isize + dxs) as usize;
                        let span = xhi - xlo;
                        let grow = &gy[oy * w + xlo..oy * w + xlo + span];
                        acc = acc + dot(grow, &src[iy * w + ixlo..iy * w + ixlo + span]);
                        let xrow = &mut gx[iy * w + ixlo..iy * w + ixlo + span];
                        for (g, &d) in xrow.iter_mut().zip(grow) {
                            *g = *g + wv * d;
                        }
                    }
                    let slot = &mut dw.data_mut()[ch * k * k + ky * k + kx];
                    *slot = *slot + acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Some(dx),
        weight: dw,
        bias: db,
    })
}

/// Non-overlapping 2×2 max pooling. Returns the output and, per output
/// element, the flat input offset of the maximum (first in row-major order
/// on ties).
pub fn max_pool_2x2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid(
            "max_pool_2x2",
            format!("spatial dims must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = p * h * w + 2 * oy * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if xd[cand] > xd[best] {
                        best = cand;
                    }
                }
                out.data_mut()[(p * oh + oy) * ow + ox] = xd[best];
                argmax.push(best);
            }
        }
    }
    Ok((out, argmax))
}

/// Interpolation taps for one axis under the half-pixel-center convention:
/// source coordinate `(d + 0.5)·src/dst − 0.5`, clamped to `[0, src − 1]`.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            let frac = s - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resampling of `planes` stacked `h×w` planes to `oh×ow`.
pub fn resize_planes<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::of(wa), T::of(wb)))
        .collect();
    let mut out = vec![T::zero(); planes * oh * ow];
    // Rows first, then columns: out = Ry · X · Rxᵀ.
    let mut rows = vec![T::zero(); w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ix, r) in rows.iter_mut().enumerate() {
                *r = wy0 * src[y0 * w + ix] + wy1 * src[y1 * w + ix];
            }
            let drow = &mut out[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (d, &(x0, x1, wx0, wx1)) in drow.iter_mut().zip(&tx) {
                *d = wx0 * rows[x0] + wx1 * rows[x1];
            }
        }
    }
    out
}

/// Adjoint of [`resize_planes`].
pub fn resize_planes_adjoint<T: Scalar>(
    g: &[T],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx: Vec<_> = bilinear_taps(w, ow)
        .into_iter()
        .map(|(a, b, wa, wb)| (a, b, T::of(wa), T::of(wb)))
        .collect();
    let mut out = vec![T::zero(); planes * h * w];
    let mut rows = vec![T::zero(); w];
    for p in 0..planes {
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            rows.fill(T::zero());
            let grow = &g[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
            for (&gv, &(x0, x1, wx0, wx1)) in grow.iter().zip(&tx) {
                rows[x0] = rows[x0] + wx0 * gv;
                rows[x1] = rows[x1] + wx1 * gv;
            }
            let (wy0, wy1) = (T::of(wy0), T::of(wy1));
            for (ix, &r) in rows.iter().enumerate() {
                dst[y0 * w + ix] = dst[y0 * w + ix] + wy0 * r;
                dst[y1 * w + ix] = dst[y1 * w + ix] + wy1 * r;
            }
        }
    }
    out
}

pub fn upsample_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 || oh == 0 || ow == 0 {
        return Err(invalid("bilinear", "spatial extents must be positive"));
    }
    Tensor::new(&[n, c, oh, ow], resize_planes(x.data(), n * c, h, w, oh, ow))
}

fn shuffle_index(c: usize, r: usize, h: usize, w: usize) -> impl Fn(usize, usize, usize, usize) -> (usize, usize) {
    // Returns (flat offset in the [N, C·r², H, W] input, flat offset in the [N, C, rH, rW] output).
    move |n, ch, y, x| {
        let src_c = ch * r * r + r * (y % r) + (x % r);
        let src = ((n * c * r * r + src_c) * h + y / r) * w + x / r;
        let dst = ((n * c + ch) * h * r + y) * w * r + x;
        (src, dst)
    }
}

/// `[N, C·r², H, W] → [N, C, rH, rW]` with
/// `out[n, c, y, x] = in[n, c·r² + r·(y mod r) + (x mod r), ⌊y/r⌋, ⌊x/r⌋]`.
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, cr, h, w) = x.dims4()?;
    if r == 0 || cr % (r * r) != 0 {
        return Err(invalid(
            "pixel_shuffle",
            format!("channel count {cr} is not divisible by r²={}", r * r),
        ));
    }
    let c = cr / (r * r);
    let idx = shuffle_index(c, r, h, w);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    for i in 0..n {
        for ch in 0..c {
            for y in 0..h * r {
                for xx in 0..w * r {
                    let (s, d) = idx(i, ch, y, xx);
                    out.data_mut()[d] = x.data()[s];
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Scalar>(y: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (n, c, hr, wr) = y.dims4()?;
    if r == 0 || hr % r != 0 || wr % r != 0 {
        return Err(invalid(
            "pixel_unshuffle",
            format!("spatial dims {hr}x{wr} not divisible by {r}"),
        ));
    }
    let (h, w) = (hr / r, wr / r);
    let idx = shuffle_index(c, r, h, w);
    let mut out = Tensor::zeros(&[n, c * r * r, h, w]);
    for i in 0..n {
        for ch in 0..c {
            for yy in 0..hr {
                for xx in 0..wr {
                    let (s, d) = idx(i, ch, yy, xx);
                    out.data_mut()[s] = y.data()[d];
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for i in 0..n {
        let base = i * c * plane;
        for p in 0..plane {
            let at = |ch: usize| base + ch * plane + p;
            let max = (0..c).map(|ch| xd[at(ch)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for ch in 0..c {
                let e = (xd[at(ch)] - max).exp();
                od[at(ch)] = e;
                total = total + e;
            }
            for ch in 0..c {
                od[at(ch)] = od[at(ch)] / total;
            }
        }
    }
    Ok(out)
}

/// Concatenate NCHW tensors along channels.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: first.shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total += pc;
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * total * plane);
    for i in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            data.extend_from_slice(&p.data()[i * pc * plane..(i + 1) * pc * plane]);
        }
    }
    Tensor::new(&[n, total, h, w], data)
}
