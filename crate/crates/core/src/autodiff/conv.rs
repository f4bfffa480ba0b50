//! Convolution family: dense, transposed and depthwise 2-D convolution.
//!
//! Dense convolutions lower to `im2col` + GEMM per batch item.

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::real::{gemm, Real, Trans};
use crate::tensor::{Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// No padding.
    Valid,
    /// Zero padding that keeps `ceil(in / stride)` outputs; an odd total is
    /// split with the smaller half on the top/left.
    Same,
    /// The same amount of zero padding on every side.
    Symmetric(usize),
}

/// Index arithmetic for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out.saturating_sub(1)) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

fn valid_out(input: usize, kernel: usize, stride: usize) -> usize {
    if input < kernel {
        0
    } else {
        (input - kernel) / stride + 1
    }
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(Error::invalid("kernel must be non-empty"));
        }
        let (out_h, out_w, pad_top, pad_left) = match padding {
            Padding::Valid => (valid_out(in_h, kh, stride), valid_out(in_w, kw, stride), 0, 0),
            Padding::Same => {
                let (oh, pt) = same_padding(in_h, kh, stride);
                let (ow, pl) = same_padding(in_w, kw, stride);
                (oh, ow, pt, pl)
            }
            Padding::Symmetric(p) => (
                valid_out(in_h + 2 * p, kh, stride),
                valid_out(in_w + 2 * p, kw, stride),
                p,
                p,
            ),
        };
        if out_h == 0 || out_w == 0 {
            return Err(Error::EmptyOutput { op: "conv2d" });
        }
        Ok(ConvGeom {
            channels,
            in_h,
            in_w,
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input coordinate hit by output `o` at kernel offset `k`, if inside.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k).checked_sub(pad)?;
        (pos < limit).then_some(pos)
    }

    /// Unfolds one `C x H x W` item into a `(C*kh*kw) x (out_h*out_w)` matrix.
    pub(crate) fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.channels {
            let plane = &x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let line = &mut dst[oy * self.out_w..(oy + 1) * self.out_w];
                        match Self::source(oy, ki, self.stride, self.pad_top, self.in_h) {
                            None => line.fill(T::zero()),
                            Some(iy) => {
                                let src = &plane[iy * self.in_w..(iy + 1) * self.in_w];
                                for (ox, out) in line.iter_mut().enumerate() {
                                    *out = match Self::source(ox, kj, self.stride, self.pad_left, self.in_w) {
                                        Some(ix) => src[ix],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates columns back into `x`.
    pub(crate) fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let p = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut x[c * self.in_h * self.in_w..(c + 1) * self.in_h * self.in_w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let Some(iy) = Self::source(oy, ki, self.stride, self.pad_top, self.in_h) else {
                            continue;
                        };
                        let line = &src[oy * self.out_w..(oy + 1) * self.out_w];
                        let dst = &mut plane[iy * self.in_w..(iy + 1) * self.in_w];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(ix) = Self::source(ox, kj, self.stride, self.pad_left, self.in_w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T], shape: Shape4) {
    let plane = shape.plane();
    for (chunk_idx, chunk) in y.chunks_mut(plane).enumerate() {
        let b = bias[chunk_idx % shape.c];
        for v in chunk {
            *v += b;
        }
    }
}

fn bias_grad<T: Real>(g: &[T], shape: Shape4) -> Vec<T> {
    let plane = shape.plane();
    let mut db = vec![T::zero(); shape.c];
    for (chunk_idx, chunk) in g.chunks(plane).enumerate() {
        db[chunk_idx % shape.c] += chunk.iter().copied().sum::<T>();
    }
    db
}

impl<T: Real> Tape<T> {
    fn check_bias(&self, b: Option<Var>, channels: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            let n = self.value(b).numel();
            if n != channels {
                return Err(Error::ChannelMismatch {
                    op,
                    expected: channels,
                    found: n,
                });
            }
        }
        Ok(())
    }

    /// 2-D convolution. `w` has shape `(out_ch, in_ch, kh, kw)` and `b`, when
    /// present, holds `out_ch` values.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c {
            return Err(Error::ChannelMismatch {
                op: "conv2d",
                expected: ws.c,
                found: xs.c,
            });
        }
        self.check_bias(b, ws.n, "conv2d bias")?;
        let geom = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, ws.w, stride, padding)?;
        let out_shape = Shape4::new(xs.n, ws.n, geom.out_h, geom.out_w);
        let mut y = vec![T::zero(); out_shape.numel()];
        let rows = geom.col_rows();
        let p = geom.col_cols();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = if geom.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
            for n in 0..xs.n {
                let xi = &xv[n * xs.item()..(n + 1) * xs.item()];
                let yi = &mut y[n * out_shape.item()..(n + 1) * out_shape.item()];
                if geom.is_pointwise() {
                    gemm(Trans::No, Trans::No, ws.n, p, rows, wv, xi, T::zero(), yi);
                } else {
                    geom.im2col(xi, &mut cols);
                    gemm(Trans::No, Trans::No, ws.n, p, rows, wv, &cols, T::zero(), yi);
                }
            }
            if let Some(b) = b {
                add_bias(&mut y, self.value(b).data(), out_shape);
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor4::from_vec(out_shape, y)?;
        Ok(self.push(value, rg, Op::Conv2d { x, w, b, geom }))
    }

    pub(super) fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let rows = geom.col_rows();
        let p = geom.col_cols();
        let out_item = ws.n * p;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut dx = if need_x { vec![T::zero(); xs.numel()] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); ws.numel()] } else { Vec::new() };
        let mut cols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * p }];
        let mut dcols = vec![T::zero(); if geom.is_pointwise() { 0 } else { rows * p }];
        for n in 0..xs.n {
            let gi = &g[n * out_item..(n + 1) * out_item];
            let xi = &xv[n * xs.item()..(n + 1) * xs.item()];
            if need_w {
                if geom.is_pointwise() {
                    gemm(Trans::No, Trans::Yes, ws.n, rows, p, gi, xi, T::one(), &mut dw);
                } else {
                    geom.im2col(xi, &mut cols);
                    gemm(Trans::No, Trans::Yes, ws.n, rows, p, gi, &cols, T::one(), &mut dw);
                }
            }
            if need_x {
                let dxi = &mut dx[n * xs.item()..(n + 1) * xs.item()];
                if geom.is_pointwise() {
                    gemm(Trans::Yes, Trans::No, rows, p, ws.n, wv, gi, T::zero(), dxi);
                } else {
                    gemm(Trans::Yes, Trans::No, rows, p, ws.n, wv, gi, T::zero(), &mut dcols);
                    geom.col2im(&dcols, dxi);
                }
            }
        }
        let mut out = Vec::with_capacity(3);
        if need_x {
            out.push((x, dx));
        }
        if need_w {
            out.push((w, dw));
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                out.push((b, bias_grad(g, Shape4::new(xs.n, ws.n, geom.out_h, geom.out_w))));
            }
        }
        out
    }

    /// Transposed convolution without padding. `w` has shape
    /// `(in_ch, out_ch, k, k)`; the output is `(H - 1) * stride + k` high.
    ///
    /// This is the adjoint of [`conv2d`](Self::conv2d) with the same kernel
    /// tensor and stride.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c {
            return Err(Error::ChannelMismatch {
                op: "conv_transpose2d",
                expected: ws.n,
                found: xs.c,
            });
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be at least 1"));
        }
        self.check_bias(b, ws.c, "conv_transpose2d bias")?;
        let out_h = (xs.h.saturating_sub(1)) * stride + ws.h;
        let out_w = (xs.w.saturating_sub(1)) * stride + ws.w;
        let geom = ConvGeom::new(ws.c, out_h, out_w, ws.h, ws.w, stride, Padding::Valid)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (xs.h, xs.w));
        let out_shape = Shape4::new(xs.n, ws.c, out_h, out_w);
        let rows = geom.col_rows();
        let p = geom.col_cols();
        let mut y = vec![T::zero(); out_shape.numel()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let mut cols = vec![T::zero(); rows * p];
            for n in 0..xs.n {
                let xi = &xv[n * xs.item()..(n + 1) * xs.item()];
                gemm(Trans::Yes, Trans::No, rows, p, xs.c, wv, xi, T::zero(), &mut cols);
                geom.col2im(&cols, &mut y[n * out_shape.item()..(n + 1) * out_shape.item()]);
            }
            if let Some(b) = b {
                add_bias(&mut y, self.value(b).data(), out_shape);
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor4::from_vec(out_shape, y)?;
        Ok(self.push(value, rg, Op::ConvTranspose2d { x, w, b, geom }))
    }

    pub(super) fn conv_transpose_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let rows = geom.col_rows();
        let p = geom.col_cols();
        let out_item = geom.channels * geom.in_h * geom.in_w;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.requires_grad(x);
        let need_w = self.requires_grad(w);
        let mut dx = if need_x { vec![T::zero(); xs.numel()] } else { Vec::new() };
        let mut dw = if need_w { vec![T::zero(); ws.numel()] } else { Vec::new() };
        let mut dcols = vec![T::zero(); rows * p];
        for n in 0..xs.n {
            geom.im2col(&g[n * out_item..(n + 1) * out_item], &mut dcols);
            if need_x {
                let dxi = &mut dx[n * xs.item()..(n + 1) * xs.item()];
                gemm(Trans::No, Trans::No, xs.c, p, rows, wv, &dcols, T::zero(), dxi);
            }
            if need_w {
                let xi = &xv[n * xs.item()..(n + 1) * xs.item()];
                gemm(Trans::No, Trans::Yes, xs.c, rows, p, xi, &dcols, T::one(), &mut dw);
            }
        }
        let mut out = Vec::with_capacity(3);
        if need_x {
            out.push((x, dx));
        }
        if need_w {
            out.push((w, dw));
        }
        if let Some(b) = b {
            if self.requires_grad(b) {
                out.push((b, bias_grad(g, Shape4::new(xs.n, ws.c, geom.in_h, geom.in_w))));
            }
        }
        out
    }

    /// Per-channel convolution. `w` has shape `(C, 1, kh, kw)`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c || ws.c != 1 {
            return Err(Error::ChannelMismatch {
                op: "depthwise_conv2d",
                expected: ws.n,
                found: xs.c,
            });
        }
        self.check_bias(b, xs.c, "depthwise_conv2d bias")?;
        let geom = ConvGeom::new(1, xs.h, xs.w, ws.h, ws.w, stride, padding)?;
        let out_shape = Shape4::new(xs.n, xs.c, geom.out_h, geom.out_w);
        let mut y = vec![T::zero(); out_shape.numel()];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let kk = geom.kh * geom.kw;
            for n in 0..xs.n {
                for c in 0..xs.c {
                    let plane = &xv[(n * xs.c + c) * xs.plane()..(n * xs.c + c + 1) * xs.plane()];
                    let kernel = &wv[c * kk..(c + 1) * kk];
                    let dst = &mut y[(n * xs.c + c) * out_shape.plane()..(n * xs.c + c + 1) * out_shape.plane()];
                    depthwise_plane(&geom, plane, kernel, dst);
                }
            }
            if let Some(b) = b {
                add_bias(&mut y, self.value(b).data(), out_shape);
            }
        }
        let rg = self.any_grad(&[x, w]) || b.is_some_and(|b| self.requires_grad(b));
        let value = Tensor4::from_vec(out_shape, y)?;
        Ok(self.push(value, rg, Op::Depthwise { x, w, b, geom }))
    }

    pub(super) fn depthwise_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: &ConvGeom,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let kk = geom.kh * geom.kw;
        let op = geom.out_h * geom.out_w;
        let mut dx = vec![T::zero(); xs.numel()];
        let mut dw = vec![T::zero(); ws.numel()];
        for n in 0..xs.n {
            for c in 0..xs.c {
                let base_in = (n * xs.c + c) * xs.plane();
                let base_out = (n * xs.c + c) * op;
                for oy in 0..geom.out_h {
                    for ox in 0..geom.out_w {
                        let go = g[base_out + oy * geom.out_w + ox];
                        for ki in 0..geom.kh {
                            let Some(iy) = ConvGeom::source(oy, ki, geom.stride, geom.pad_top, geom.in_h) else {
                                continue;
                            };
                            for kj in 0..geom.kw {
                                let Some(ix) = ConvGeom::source(ox, kj, geom.stride, geom.pad_left, geom.in_w)
                                else {
                                    continue;
                                };
                                let xi = base_in + iy * geom.in_w + ix;
                                let wi = c * kk + ki * geom.kw + kj;
                                dx[xi] += go * wv[wi];
                                dw[wi] += go * xv[xi];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![(x, dx), (w, dw)];
        if let Some(b) = b {
            out.push((b, bias_grad(g, Shape4::new(xs.n, xs.c, geom.out_h, geom.out_w))));
        }
        out
    }
}

fn depthwise_plane<T: Real>(geom: &ConvGeom, plane: &[T], kernel: &[T], dst: &mut [T]) {
    for oy in 0..geom.out_h {
        for ox in 0..geom.out_w {
            let mut s = T::zero();
            for ki in 0..geom.kh {
                let Some(iy) = ConvGeom::source(oy, ki, geom.stride, geom.pad_top, geom.in_h) else {
                    continue;
                };
                for kj in 0..geom.kw {
                    if let Some(ix) = ConvGeom::source(ox, kj, geom.stride, geom.pad_left, geom.in_w) {
                        s += kernel[ki * geom.kw + kj] * plane[iy * geom.in_w + ix];
                    }
                }
            }
            dst[oy * geom.out_w + ox] = s;
        }
    }
}
