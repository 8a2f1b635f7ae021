//! Raw forward/backward kernels over flat buffers.
//!
//! These know nothing about the tape; [`super::Tape`] calls them and stores
//! whatever the backward pass needs.

use super::{gemm, MatLayout, Real};
use crate::error::{Error, Result};

/// Window reduction used by pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PoolMode {
    Max,
    Min,
    Avg,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Max => "max",
            PoolMode::Min => "min",
            PoolMode::Avg => "avg",
        }
    }
}

impl std::str::FromStr for PoolMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "min" => Ok(PoolMode::Min),
            "avg" | "mean" => Ok(PoolMode::Avg),
            other => Err(Error::config(format!("unknown pooling mode '{other}'"))),
        }
    }
}

fn shape4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Error::shape(format!("{what} expects a 4-d tensor, got shape {shape:?}"))),
    }
}

/// Geometry of one 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, c_in, h, w] = shape4(input, "conv2d input")?;
        let [c_out, wc_in, kh, kw] = shape4(weight, "conv2d weight")?;
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d channel mismatch: weight expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be at least 1"));
        }
        if kh > h + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {kh} exceeds padded height {}",
                h + 2 * padding
            )));
        }
        if kw > w + 2 * padding {
            return Err(Error::shape(format!(
                "conv2d kernel {kw} exceeds padded width {}",
                w + 2 * padding
            )));
        }
        Ok(ConvGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            kernel: kh,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.h_out, self.w_out]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose stride-1 input column `ow + kw − padding`
/// falls inside the image.
fn valid_span(g: &ConvGeom, kw: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kw).min(g.w_out);
    let hi = (g.w + g.padding).saturating_sub(kw).min(g.w_out).max(lo);
    (lo, hi)
}

/// Output rows `lo..hi` whose input row `oh·stride + kh − padding` falls
/// inside the image.
fn valid_rows(g: &ConvGeom, kh: usize) -> (usize, usize) {
    let first = g.padding.saturating_sub(kh).div_ceil(g.stride);
    let end = (g.h + g.padding).saturating_sub(kh).div_ceil(g.stride);
    let hi = end.min(g.h_out);
    (first.min(hi), hi)
}

/// Unfolds one sample `c_in×h×w` into `(c_in·k·k)×(h_out·w_out)` columns.
/// Only in-image entries are written, so padding positions keep whatever
/// `col` held; callers pass a zeroed buffer and reuse it across samples.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let k = g.kernel;
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_rows(g, kh);
            for kw in 0..k {
                let row = &mut col[((ci * k + kh) * k + kw) * p..][..p];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.padding;
                    let src = &plane[ih * g.w..(ih + 1) * g.w];
                    let dst = &mut row[oh * g.w_out..(oh + 1) * g.w_out];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kw);
                        let start = lo + kw - g.padding;
                        dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        continue;
                    }
                    for (ow, d) in dst.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            *d = src[iw as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input plane.
fn col2im<T: Real>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let k = g.kernel;
    let p = g.positions();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for kh in 0..k {
            let (oh_lo, oh_hi) = valid_rows(g, kh);
            for kw in 0..k {
                let row = &col[((ci * k + kh) * k + kw) * p..][..p];
                for oh in oh_lo..oh_hi {
                    let ih = oh * g.stride + kh - g.padding;
                    let dst = &mut plane[ih * g.w..(ih + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kw);
                        let start = lo + kw - g.padding;
                        let src = &row[oh * g.w_out + lo..oh * g.w_out + hi];
                        for (d, &v) in dst[start..start + (hi - lo)].iter_mut().zip(src) {
                            *d = *d + v;
                        }
                        continue;
                    }
                    for ow in 0..g.w_out {
                        let iw = (ow * g.stride + kw) as isize - g.padding as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] = dst[iw as usize] + row[oh * g.w_out + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 convolutions over enough channels skip the unfold: the input is
/// zero-padded once and each kernel tap is a strided GEMM over the padded
/// planes. Output rows are computed `wp` wide and the trailing `k − 1`
/// columns of each row are discarded.
struct Shifted {
    wp: usize,
    plane: usize,
    /// Columns of the widened output, `h_out · wp`.
    n: usize,
}

const SHIFTED_MIN_CHANNELS: usize = 16;

impl Shifted {
    fn for_geom(g: &ConvGeom) -> Option<Self> {
        if g.stride != 1 || g.is_pointwise() || g.c_in < SHIFTED_MIN_CHANNELS {
            return None;
        }
        let (hp, wp) = (g.h + 2 * g.padding, g.w + 2 * g.padding);
        Some(Shifted { wp, plane: hp * wp, n: g.h_out * wp })
    }

    /// Padded input buffer; the last taps read `k − 1` entries past the end
    /// of the final plane, which only feed discarded columns.
    fn padded_len(&self, g: &ConvGeom) -> usize {
        g.c_in * self.plane + g.kernel - 1
    }

    /// Writes the interior of every padded plane; borders keep their zeros.
    fn pad<T: Real>(&self, x: &[T], g: &ConvGeom, buf: &mut [T]) {
        for ci in 0..g.c_in {
            for ih in 0..g.h {
                let dst = ci * self.plane + (ih + g.padding) * self.wp + g.padding;
                buf[dst..dst + g.w].copy_from_slice(&x[(ci * g.h + ih) * g.w..][..g.w]);
            }
        }
    }
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    if let Some(sh) = Shifted::for_geom(g) {
        return conv2d_forward_shifted(x, weight, bias, g, &sh);
    }
    let p = g.positions();
    let kk = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kk * p] };
    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut col);
            &col
        };
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        gemm(
            weight,
            MatLayout::row_major(g.c_out, kk),
            cols,
            MatLayout::row_major(kk, p),
            T::zero(),
            ob,
            MatLayout::row_major(g.c_out, p),
        );
        if let Some(bias) = bias {
            for (co, row) in ob.chunks_mut(p).enumerate() {
                let bv = bias[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    out
}

fn conv2d_forward_shifted<T: Real>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, sh: &Shifted) -> Vec<T> {
    let k = g.kernel;
    let taps = k * k;
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * g.positions();
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut xpad = vec![T::zero(); sh.padded_len(g)];
    let mut wide = vec![T::zero(); g.c_out * sh.n];
    let la = MatLayout { rows: g.c_out, cols: g.c_in, row_stride: g.c_in * taps, col_stride: taps };
    let lb = MatLayout { rows: g.c_in, cols: sh.n, row_stride: sh.plane, col_stride: 1 };
    for b in 0..g.batch {
        sh.pad(&x[b * in_len..(b + 1) * in_len], g, &mut xpad);
        for t in 0..taps {
            let off = (t / k) * sh.wp + t % k;
            let beta = if t == 0 { T::zero() } else { T::one() };
            gemm(&weight[t..], la, &xpad[off..], lb, beta, &mut wide, MatLayout::row_major(g.c_out, sh.n));
        }
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        for co in 0..g.c_out {
            let bv = bias.map_or(T::zero(), |bias| bias[co]);
            for oh in 0..g.h_out {
                let src = &wide[co * sh.n + oh * sh.wp..][..g.w_out];
                let dst = &mut ob[(co * g.h_out + oh) * g.w_out..][..g.w_out];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bv;
                }
            }
        }
    }
    out
}

/// Gradients of a convolution; `None` entries are skipped.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    if let Some(sh) = Shifted::for_geom(g) {
        return conv2d_backward_shifted(x, weight, dout, g, &sh, need_input, need_weight, need_bias);
    }
    let p = g.positions();
    let kk = g.patch_len();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need_weight.then(|| vec![T::zero(); g.c_out * kk]);
    let mut db = need_bias.then(|| vec![T::zero(); g.c_out]);
    let mut col = vec![T::zero(); if g.is_pointwise() { 0 } else { kk * p }];
    let mut dcol = vec![T::zero(); if need_input && !g.is_pointwise() { kk * p } else { 0 }];

    for b in 0..g.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let gb = &dout[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut col);
                &col
            };
            gemm(
                gb,
                MatLayout::row_major(g.c_out, p),
                cols,
                MatLayout::transposed(p, kk),
                T::one(),
                dw,
                MatLayout::row_major(g.c_out, kk),
            );
        }
        if let Some(db) = db.as_mut() {
            for (co, row) in gb.chunks(p).enumerate() {
                db[co] = db[co] + lane_sum(row);
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            if g.is_pointwise() {
                gemm(
                    weight,
                    MatLayout::transposed(kk, g.c_out),
                    gb,
                    MatLayout::row_major(g.c_out, p),
                    T::zero(),
                    dxb,
                    MatLayout::row_major(kk, p),
                );
            } else {
                gemm(
                    weight,
                    MatLayout::transposed(kk, g.c_out),
                    gb,
                    MatLayout::row_major(g.c_out, p),
                    T::zero(),
                    &mut dcol,
                    MatLayout::row_major(kk, p),
                );
                col2im(&dcol, g, dxb);
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_shifted<T: Real>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    sh: &Shifted,
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let k = g.kernel;
    let taps = k * k;
    let p = g.positions();
    let in_len = g.c_in * g.h * g.w;
    let out_len = g.c_out * p;
    let mut dx = need_input.then(|| vec![T::zero(); g.batch * in_len]);
    let mut dw = need_weight.then(|| vec![T::zero(); g.c_out * g.c_in * taps]);
    let mut db = need_bias.then(|| vec![T::zero(); g.c_out]);
    let kk = g.patch_len();
    // The weight gradient still goes through im2col.
    let mut col = vec![T::zero(); if need_weight { kk * p } else { 0 }];
    let mut dxpad = vec![T::zero(); if need_input { sh.padded_len(g) } else { 0 }];
    // Discarded columns stay zero so they contribute nothing below.
    let mut wide = vec![T::zero(); g.c_out * sh.n];
    let lwt = MatLayout { rows: g.c_in, cols: g.c_out, row_stride: taps, col_stride: g.c_in * taps };
    let lwide = MatLayout::row_major(g.c_out, sh.n);
    let lplanes = MatLayout { rows: g.c_in, cols: sh.n, row_stride: sh.plane, col_stride: 1 };

    for b in 0..g.batch {
        let gb = &dout[b * out_len..(b + 1) * out_len];
        if let Some(db) = db.as_mut() {
            for (co, row) in gb.chunks(p).enumerate() {
                db[co] = db[co] + lane_sum(row);
            }
        }
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, &mut col);
            gemm(gb, MatLayout::row_major(g.c_out, p), &col, MatLayout::transposed(p, kk), T::one(), dw, MatLayout::row_major(g.c_out, kk));
        }
        if let Some(dx) = dx.as_mut() {
            for co in 0..g.c_out {
                for oh in 0..g.h_out {
                    let src = &gb[(co * g.h_out + oh) * g.w_out..][..g.w_out];
                    wide[co * sh.n + oh * sh.wp..][..g.w_out].copy_from_slice(src);
                }
            }
            dxpad.fill(T::zero());
            for t in 0..taps {
                let off = (t / k) * sh.wp + t % k;
                gemm(&weight[t..], lwt, &wide, lwide, T::one(), &mut dxpad[off..], lplanes);
            }
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            for ci in 0..g.c_in {
                for ih in 0..g.h {
                    let src = ci * sh.plane + (ih + g.padding) * sh.wp + g.padding;
                    dxb[(ci * g.h + ih) * g.w..][..g.w].copy_from_slice(&dxpad[src..src + g.w]);
                }
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}

/// Geometry of a windowed pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub batch: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let [batch, channels, h, w] = shape4(input, "pool2d input")?;
        if window == 0 || stride == 0 {
            return Err(Error::shape("pool2d window and stride must be at least 1"));
        }
        if window > h || window > w {
            return Err(Error::shape(format!(
                "pool2d window {window} exceeds spatial extent {h}x{w}"
            )));
        }
        Ok(PoolGeom {
            batch,
            channels,
            h,
            w,
            window,
            stride,
            h_out: (h - window) / stride + 1,
            w_out: (w - window) / stride + 1,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.h_out, self.w_out]
    }
}

/// Returns the pooled values and, for max/min, the flat input index chosen
/// for every output cell (first occurrence in row-major order on ties).
pub fn pool2d_forward<T: Real>(x: &[T], g: &PoolGeom, mode: PoolMode) -> (Vec<T>, Vec<usize>) {
    match mode {
        PoolMode::Avg => (pool_avg(x, g), Vec::new()),
        PoolMode::Max => pool_select(x, g, |v, best| v > best),
        PoolMode::Min => pool_select(x, g, |v, best| v < best),
    }
}

fn pool_avg<T: Real>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let n = T::from_usize(g.window * g.window).unwrap();
    let mut out = Vec::with_capacity(g.batch * g.channels * g.h_out * g.w_out);
    for plane in x.chunks_exact(g.h * g.w) {
        for oh in 0..g.h_out {
            for ow in 0..g.w_out {
                let (h0, w0) = (oh * g.stride, ow * g.stride);
                let mut acc = T::zero();
                for row in plane[h0 * g.w..].chunks(g.w).take(g.window) {
                    acc = acc + row[w0..w0 + g.window].iter().copied().sum::<T>();
                }
                out.push(acc / n);
            }
        }
    }
    out
}

/// Max or min pooling; `arg` holds the flat input index of the first
/// element in row-major window order that wins under `better`.
fn pool_select<T: Real>(x: &[T], g: &PoolGeom, better: impl Fn(T, T) -> bool) -> (Vec<T>, Vec<usize>) {
    let len = g.batch * g.channels * g.h_out * g.w_out;
    let (mut out, mut arg) = (Vec::with_capacity(len), Vec::with_capacity(len));
    for (pi, plane) in x.chunks_exact(g.h * g.w).enumerate() {
        let base = pi * g.h * g.w;
        for oh in 0..g.h_out {
            let h0 = oh * g.stride;
            if g.window == 2 && g.stride == 2 {
                let (r0, r1) = (&plane[h0 * g.w..][..g.w], &plane[(h0 + 1) * g.w..][..g.w]);
                for ow in 0..g.w_out {
                    let w0 = 2 * ow;
                    let mut best = (r0[w0], h0 * g.w + w0);
                    for (v, idx) in [(r0[w0 + 1], h0 * g.w + w0 + 1), (r1[w0], (h0 + 1) * g.w + w0), (r1[w0 + 1], (h0 + 1) * g.w + w0 + 1)] {
                        if better(v, best.0) {
                            best = (v, idx);
                        }
                    }
                    out.push(best.0);
                    arg.push(base + best.1);
                }
                continue;
            }
            for ow in 0..g.w_out {
                let w0 = ow * g.stride;
                let mut best = (plane[h0 * g.w + w0], h0 * g.w + w0);
                for i in h0..h0 + g.window {
                    for j in w0..w0 + g.window {
                        let v = plane[i * g.w + j];
                        if better(v, best.0) {
                            best = (v, i * g.w + j);
                        }
                    }
                }
                out.push(best.0);
                arg.push(base + best.1);
            }
        }
    }
    (out, arg)
}

pub fn pool2d_backward<T: Real>(
    dout: &[T],
    g: &PoolGeom,
    mode: PoolMode,
    arg: &[usize],
) -> Vec<T> {
    let mut dx = vec![T::zero(); g.batch * g.channels * g.h * g.w];
    match mode {
        PoolMode::Avg => {
            let n = T::from_usize(g.window * g.window).unwrap();
            let per_plane = g.h_out * g.w_out;
            for (o, &d) in dout.iter().enumerate() {
                let plane = o / per_plane;
                let (oh, ow) = ((o % per_plane) / g.w_out, o % g.w_out);
                let base = plane * g.h * g.w;
                let share = d / n;
                for i in oh * g.stride..oh * g.stride + g.window {
                    for j in ow * g.stride..ow * g.stride + g.window {
                        dx[base + i * g.w + j] = dx[base + i * g.w + j] + share;
                    }
                }
            }
        }
        PoolMode::Max | PoolMode::Min => {
            for (&d, &idx) in dout.iter().zip(arg) {
                dx[idx] = dx[idx] + d;
            }
        }
    }
    dx
}

/// Reduction over `len` contiguous groups of `group` elements each.
/// Returns reduced values and the chosen flat index for max/min.
pub fn reduce_groups<T: Real>(
    x: &[T],
    groups: usize,
    index_of: impl Fn(usize, usize) -> usize,
    group_len: usize,
    mode: PoolMode,
) -> (Vec<T>, Vec<usize>) {
    let mut out = Vec::with_capacity(groups);
    let mut arg = Vec::new();
    let n = T::from_usize(group_len).unwrap();
    for gi in 0..groups {
        match mode {
            PoolMode::Avg => {
                let mut acc = T::zero();
                for e in 0..group_len {
                    acc = acc + x[index_of(gi, e)];
                }
                out.push(acc / n);
            }
            PoolMode::Max | PoolMode::Min => {
                let mut best = index_of(gi, 0);
                for e in 1..group_len {
                    let idx = index_of(gi, e);
                    let better = if mode == PoolMode::Max { x[idx] > x[best] } else { x[idx] < x[best] };
                    if better {
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

/// Softmax along `axis_len` with `inner` trailing elements per step.
pub fn softmax_forward<T: Real>(x: &[T], outer: usize, axis_len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_len + a) * inner + i;
            let mut m = T::neg_infinity();
            for a in 0..axis_len {
                m = m.max(x[at(a)]);
            }
            let mut s = T::zero();
            for a in 0..axis_len {
                let e = (x[at(a)] - m).exp();
                y[at(a)] = e;
                s = s + e;
            }
            for a in 0..axis_len {
                y[at(a)] = y[at(a)] / s;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Real>(
    y: &[T],
    dy: &[T],
    outer: usize,
    axis_len: usize,
    inner: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * axis_len + a) * inner + i;
            let dot: T = (0..axis_len).map(|a| dy[at(a)] * y[at(a)]).sum();
            for a in 0..axis_len {
                dx[at(a)] = y[at(a)] * (dy[at(a)] - dot);
            }
        }
    }
    dx
}

/// Saved state of a normalization for its backward pass.
pub struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    /// Batch statistics were used (gradient flows through mean/var).
    pub batch_stats: bool,
}

/// `Σ f(x)` over eight interleaved accumulators so the loop vectorizes.
#[inline]
pub fn lane_sum_by<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder().iter().fold(T::zero(), |s, &v| s + f(v));
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a = *a + f(v);
        }
    }
    fold_lanes(acc) + tail
}

#[inline]
pub fn lane_sum<T: Real>(xs: &[T]) -> T {
    lane_sum_by(xs, |v| v)
}

/// `Σ a·b` with the same lane structure as [`lane_sum_by`].
#[inline]
pub fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail = ca.remainder().iter().zip(cb.remainder()).fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    fold_lanes(acc) + tail
}

#[inline]
fn fold_lanes<T: Real>(acc: [T; 8]) -> T {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Per-channel normalization of a `[B, C, P]` buffer over `B·P` elements.
/// With `stats = None` the batch statistics are computed and returned as
/// `(mean, biased_var)`.
pub fn batchnorm_forward<T: Real>(
    x: &[T],
    dims: [usize; 3],
    gamma: &[T],
    beta: &[T],
    stats: Option<(&[T], &[T])>,
    eps: T,
) -> (Vec<T>, NormSaved<T>, Option<(Vec<T>, Vec<T>)>) {
    let [b, c, p] = dims;
    let n = T::from_usize(b * p).unwrap();
    let (mean, var, batch) = match stats {
        Some((m, v)) => (m.to_vec(), v.to_vec(), false),
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    let xs = &x[(bi * c + ch) * p..][..p];
                    s = s + lane_sum(xs);
                }
                let m = s / n;
                let mut ss = T::zero();
                for bi in 0..b {
                    let xs = &x[(bi * c + ch) * p..][..p];
                    ss = ss + lane_sum_by(xs, |v| (v - m) * (v - m));
                }
                mean[ch] = m;
                var[ch] = ss / n;
            }
            (mean, var, true)
        }
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * p;
            let (m, is, ga, be) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for ((xh, yo), &xv) in xhat[off..off + p].iter_mut().zip(&mut y[off..off + p]).zip(&x[off..off + p]) {
                let h = (xv - m) * is;
                *xh = h;
                *yo = ga * h + be;
            }
        }
    }
    let saved = NormSaved { xhat, inv_std, batch_stats: batch };
    (y, saved, batch.then_some((mean, var)))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(
    dy: &[T],
    dims: [usize; 3],
    gamma: &[T],
    saved: &NormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [b, c, p] = dims;
    let n = T::from_usize(b * p).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * p;
            let (d, h) = (&dy[off..off + p], &saved.xhat[off..off + p]);
            dgamma[ch] = dgamma[ch] + lane_dot(d, h);
            dbeta[ch] = dbeta[ch] + lane_sum(d);
        }
    }
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * p;
            let k = gamma[ch] * saved.inv_std[ch];
            let (mb, mg) = (dbeta[ch] / n, dgamma[ch] / n);
            let out = &mut dx[off..off + p];
            if saved.batch_stats {
                for ((o, &d), &h) in out.iter_mut().zip(&dy[off..off + p]).zip(&saved.xhat[off..off + p]) {
                    *o = k * (d - mb - h * mg);
                }
            } else {
                for (o, &d) in out.iter_mut().zip(&dy[off..off + p]) {
                    *o = k * d;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Normalization of a `[B, C, P]` buffer over the channel axis, separately
/// for every `(b, p)`, with per-channel affine terms.
pub fn channelnorm_forward<T: Real>(
    x: &[T],
    dims: [usize; 3],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormSaved<T>) {
    let [b, c, p] = dims;
    let n = T::from_usize(c).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); b * p];
    for bi in 0..b {
        for pi in 0..p {
            let at = |ch: usize| (bi * c + ch) * p + pi;
            let m = (0..c).map(|ch| x[at(ch)]).sum::<T>() / n;
            let v = (0..c).map(|ch| (x[at(ch)] - m) * (x[at(ch)] - m)).sum::<T>() / n;
            let is = T::one() / (v + eps).sqrt();
            inv_std[bi * p + pi] = is;
            for ch in 0..c {
                let h = (x[at(ch)] - m) * is;
                xhat[at(ch)] = h;
                y[at(ch)] = gamma[ch] * h + beta[ch];
            }
        }
    }
    (y, NormSaved { xhat, inv_std, batch_stats: true })
}

pub fn channelnorm_backward<T: Real>(
    dy: &[T],
    dims: [usize; 3],
    gamma: &[T],
    saved: &NormSaved<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [b, c, p] = dims;
    let n = T::from_usize(c).unwrap();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); dy.len()];
    for bi in 0..b {
        for pi in 0..p {
            let at = |ch: usize| (bi * c + ch) * p + pi;
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for ch in 0..c {
                let i = at(ch);
                dgamma[ch] = dgamma[ch] + dy[i] * saved.xhat[i];
                dbeta[ch] = dbeta[ch] + dy[i];
                let dh = dy[i] * gamma[ch];
                s1 = s1 + dh;
                s2 = s2 + dh * saved.xhat[i];
            }
            let is = saved.inv_std[bi * p + pi];
            for ch in 0..c {
                let i = at(ch);
                let dh = dy[i] * gamma[ch];
                dx[i] = is * (dh - s1 / n - saved.xhat[i] * s2 / n);
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_geometry_matches_floor_formula() {
        let g = ConvGeom::new(&[1, 3, 40, 40], &[64, 3, 3, 3], 1, 1).unwrap();
        assert_eq!(g.out_shape(), [1, 64, 40, 40]);
        let g = ConvGeom::new(&[1, 1, 7, 9], &[1, 1, 3, 3], 2, 0).unwrap();
        assert_eq!(g.out_shape(), [1, 1, 3, 4]);
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let err = ConvGeom::new(&[1, 4, 8, 8], &[2, 3, 3, 3], 1, 1).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn pool_window_too_large() {
        assert!(PoolGeom::new(&[1, 1, 3, 3], 4, 4).is_err());
    }

    #[test]
    fn pool_ties_pick_first_element() {
        let x = [1.0f64, 1.0, 1.0, 1.0];
        let g = PoolGeom::new(&[1, 1, 2, 2], 2, 2).unwrap();
        let (_, arg) = pool2d_forward(&x, &g, PoolMode::Max);
        assert_eq!(arg, vec![0]);
        let (_, arg) = pool2d_forward(&x, &g, PoolMode::Min);
        assert_eq!(arg, vec![0]);
    }
}
