//! Slice-level forward and adjoint kernels.
//!
//! Everything here works on flat row-major buffers; [`crate::Tape`] wraps
//! these with shape checks and gradient bookkeeping. Convolutions lower to
//! GEMMs via im2col over cache-sized chunks of the batch.

use std::borrow::Cow;

use crate::element::{gemm, Element, MatRef};

/// Geometry of a 2-D cross-correlation from `(n, c, h, w)` to `(n, _, oh, ow)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output spatial size is `floor((h + 2 pad - k) / stride) + 1`; `None`
    /// when the kernel does not fit.
    pub fn new(n: usize, c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return None;
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Some(Self { n, c, h, w, kh, kw, stride, pad, oh, ow })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

/// Unfold `(n, c, h, w)` into a `(c*kh*kw, n*oh*ow)` patch matrix.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = Vec::new();
    im2col_into(x, g, &mut cols);
    cols
}

fn im2col_into<T: Element>(x: &[T], g: &ConvGeom, cols: &mut Vec<T>) {
    let ohw = g.oh * g.ow;
    let ncols = g.col_cols();
    cols.clear();
    cols.resize(g.col_rows() * ncols, T::zero());
    let pad = g.pad as isize;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * ohw..(n + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            // ix = ox + kj - pad is contiguous; copy the valid span.
                            let lo = (pad - kj as isize).max(0) as usize;
                            let hi = ((g.w as isize + pad - kj as isize).min(g.ow as isize)).max(0) as usize;
                            if lo < hi {
                                let ix0 = (lo as isize + kj as isize - pad) as usize;
                                dst_seg[lo..hi].copy_from_slice(&src_row[ix0..ix0 + hi - lo]);
                            }
                        } else {
                            for (ox, d) in dst_seg.iter_mut().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - pad;
                                if ix >= 0 && ix < g.w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patches back into `(n, c, h, w)`.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    col2im_add(cols, g, &mut x);
    x
}

fn col2im_add<T: Element>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let ohw = g.oh * g.ow;
    let ncols = g.col_cols();
    let pad = g.pad as isize;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * ohw..(n + 1) * ohw];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let src_seg = &src[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let lo = (pad - kj as isize).max(0) as usize;
                            let hi = ((g.w as isize + pad - kj as isize).min(g.ow as isize)).max(0) as usize;
                            if lo < hi {
                                let ix0 = (lo as isize + kj as isize - pad) as usize;
                                for (d, &v) in dst_row[ix0..ix0 + hi - lo].iter_mut().zip(&src_seg[lo..hi]) {
                                    *d += v;
                                }
                            }
                        } else {
                            for (ox, &v) in src_seg.iter().enumerate() {
                                let ix = (ox * g.stride + kj) as isize - pad;
                                if ix >= 0 && ix < g.w as isize {
                                    dst_row[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(n, c, hw)` -> `(c, n*hw)`.
pub fn nc_to_cn<T: Element>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]
                .copy_from_slice(&x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
        }
    }
    out
}

/// `(c, n*hw)` -> `(n, c, hw)`.
pub fn cn_to_nc<T: Element>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    cn_to_nc_into(x, n, c, hw, &mut out);
    out
}

fn cn_to_nc_into<T: Element>(x: &[T], n: usize, c: usize, hw: usize, out: &mut [T]) {
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]
                .copy_from_slice(&x[ci * n * hw + ni * hw..ci * n * hw + (ni + 1) * hw]);
        }
    }
}

/// Channel-major view of a batch chunk; a single sample needs no copy.
fn to_cn<T: Element>(x: &[T], n: usize, c: usize, hw: usize) -> Cow<'_, [T]> {
    if n == 1 {
        Cow::Borrowed(x)
    } else {
        Cow::Owned(nc_to_cn(x, n, c, hw))
    }
}

/// Target GEMM width (columns of the patch matrix) per batch chunk.
const CHUNK_COLS: usize = 4096;

/// Splits the batch of `g` into consecutive `(first sample, chunk geometry)` pieces.
fn batch_chunks(g: &ConvGeom) -> impl Iterator<Item = (usize, ConvGeom)> {
    let per = (g.oh * g.ow).max(1);
    let b = (CHUNK_COLS / per).clamp(1, g.n.max(1));
    let g = *g;
    (0..g.n).step_by(b).map(move |s| (s, ConvGeom { n: (g.n - s).min(b), ..g }))
}

fn add_channel_bias_in_place<T: Element>(out: &mut [T], bias: &[T], n: usize, c: usize, hw: usize) {
    for ni in 0..n {
        for (ci, &b) in bias.iter().enumerate().take(c) {
            for v in &mut out[(ni * c + ci) * hw..(ni * c + ci + 1) * hw] {
                *v += b;
            }
        }
    }
}

fn channel_sums<T: Element>(x: &[T], n: usize, c: usize, hw: usize) -> Vec<T> {
    let mut s = vec![T::zero(); c];
    for ni in 0..n {
        for (ci, acc) in s.iter_mut().enumerate() {
            *acc += x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw].iter().copied().sum::<T>();
        }
    }
    s
}

/// Cross-correlation of `x: (n, c, h, w)` with `weight: (o, c, kh, kw)`.
pub fn conv2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, o: usize) -> Vec<T> {
    let ohw = g.oh * g.ow;
    let (chw, ck) = (g.c * g.h * g.w, g.col_rows());
    let mut out = vec![T::zero(); g.n * o * ohw];
    let (mut cols, mut tmp) = (Vec::new(), Vec::new());
    for (s, gb) in batch_chunks(g) {
        im2col_into(&x[s * chw..(s + gb.n) * chw], &gb, &mut cols);
        let dst = &mut out[s * o * ohw..(s + gb.n) * o * ohw];
        if gb.n == 1 {
            gemm(MatRef::new(weight, o, ck), MatRef::new(&cols, ck, ohw), T::zero(), dst);
        } else {
            tmp.resize(o * gb.col_cols(), T::zero());
            gemm(MatRef::new(weight, o, ck), MatRef::new(&cols, ck, gb.col_cols()), T::zero(), &mut tmp);
            cn_to_nc_into(&tmp, gb.n, o, ohw, dst);
        }
    }
    if let Some(b) = bias {
        add_channel_bias_in_place(&mut out, b, g.n, o, ohw);
    }
    out
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    o: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let ohw = g.oh * g.ow;
    let (chw, ck) = (g.c * g.h * g.w, g.col_rows());
    let mut dw = need[1].then(|| vec![T::zero(); o * ck]);
    let mut dx = need[0].then(|| vec![T::zero(); g.n * chw]);
    let (mut cols, mut dcols) = (Vec::new(), Vec::new());
    for (s, gb) in batch_chunks(g) {
        let ncols = gb.col_cols();
        let dperm = to_cn(&dout[s * o * ohw..(s + gb.n) * o * ohw], gb.n, o, ohw);
        if let Some(dw) = dw.as_mut() {
            im2col_into(&x[s * chw..(s + gb.n) * chw], &gb, &mut cols);
            let beta = if s == 0 { T::zero() } else { T::one() };
            gemm(MatRef::new(&dperm, o, ncols), MatRef::transposed(&cols, ncols, ck), beta, dw);
        }
        if let Some(dx) = dx.as_mut() {
            dcols.resize(ck * ncols, T::zero());
            gemm(MatRef::transposed(weight, ck, o), MatRef::new(&dperm, o, ncols), T::zero(), &mut dcols);
            col2im_add(&dcols, &gb, &mut dx[s * chw..(s + gb.n) * chw]);
        }
    }
    let db = need[2].then(|| channel_sums(dout, g.n, o, ohw));
    ConvGrads { dx, dw, db }
}

/// Geometry of a transposed convolution `(n, cin, h, w) -> (n, cout, oh, ow)`
/// with `oh = (h - 1) stride - 2 pad + kh`, expressed as the forward conv it
/// is the adjoint of.
pub fn conv_transpose_geom(
    n: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Option<ConvGeom> {
    if stride == 0 || h == 0 || w == 0 {
        return None;
    }
    let oh = ((h - 1) * stride + kh).checked_sub(2 * pad)?;
    let ow = ((w - 1) * stride + kw).checked_sub(2 * pad)?;
    let g = ConvGeom::new(n, cout, oh, ow, kh, kw, stride, pad)?;
    (g.oh == h && g.ow == w).then_some(g)
}

/// `x: (n, cin, h, w)`, `weight: (cin, cout, kh, kw)`; `g` from [`conv_transpose_geom`].
pub fn conv_transpose2d_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom, cin: usize) -> Vec<T> {
    let hw = g.oh * g.ow;
    let ck = g.col_rows();
    let chw = g.c * g.h * g.w;
    let mut out = vec![T::zero(); g.n * chw];
    let mut cols = Vec::new();
    for (s, gb) in batch_chunks(g) {
        let ncols = gb.col_cols();
        let xperm = to_cn(&x[s * cin * hw..(s + gb.n) * cin * hw], gb.n, cin, hw);
        cols.resize(ck * ncols, T::zero());
        gemm(MatRef::transposed(weight, ck, cin), MatRef::new(&xperm, cin, ncols), T::zero(), &mut cols);
        col2im_add(&cols, &gb, &mut out[s * chw..(s + gb.n) * chw]);
    }
    if let Some(b) = bias {
        add_channel_bias_in_place(&mut out, b, g.n, g.c, g.h * g.w);
    }
    out
}

pub fn conv_transpose2d_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    cin: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let hw = g.oh * g.ow;
    let ck = g.col_rows();
    let chw = g.c * g.h * g.w;
    let mut dx = need[0].then(|| vec![T::zero(); g.n * cin * hw]);
    let mut dw = need[1].then(|| vec![T::zero(); cin * ck]);
    let (mut dcols, mut dxp) = (Vec::new(), Vec::new());
    for (s, gb) in batch_chunks(g) {
        let ncols = gb.col_cols();
        im2col_into(&dout[s * chw..(s + gb.n) * chw], &gb, &mut dcols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[s * cin * hw..(s + gb.n) * cin * hw];
            if gb.n == 1 {
                gemm(MatRef::new(weight, cin, ck), MatRef::new(&dcols, ck, ncols), T::zero(), dst);
            } else {
                dxp.resize(cin * ncols, T::zero());
                gemm(MatRef::new(weight, cin, ck), MatRef::new(&dcols, ck, ncols), T::zero(), &mut dxp);
                cn_to_nc_into(&dxp, gb.n, cin, hw, dst);
            }
        }
        if let Some(dw) = dw.as_mut() {
            let xperm = to_cn(&x[s * cin * hw..(s + gb.n) * cin * hw], gb.n, cin, hw);
            let beta = if s == 0 { T::zero() } else { T::one() };
            gemm(MatRef::new(&xperm, cin, ncols), MatRef::transposed(&dcols, ncols, ck), beta, dw);
        }
    }
    let db = need[2].then(|| channel_sums(dout, g.n, g.c, g.h * g.w));
    ConvGrads { dx, dw, db }
}

/// `x: (n, in) * weight^T` with `weight: (out, in)`.
pub fn linear_forward<T: Element>(x: &[T], weight: &[T], bias: Option<&[T]>, n: usize, din: usize, dout: usize) -> Vec<T> {
    let mut y = vec![T::zero(); n * dout];
    gemm(MatRef::new(x, n, din), MatRef::transposed(weight, din, dout), T::zero(), &mut y);
    if let Some(b) = bias {
        for row in y.chunks_mut(dout) {
            for (v, &bb) in row.iter_mut().zip(b) {
                *v += bb;
            }
        }
    }
    y
}

pub fn linear_backward<T: Element>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    n: usize,
    din: usize,
    dout: usize,
    need: [bool; 3],
) -> ConvGrads<T> {
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); n * din];
        gemm(MatRef::new(dy, n, dout), MatRef::new(weight, dout, din), T::zero(), &mut dx);
        dx
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); dout * din];
        gemm(MatRef::transposed(dy, dout, n), MatRef::new(x, n, din), T::zero(), &mut dw);
        dw
    });
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); dout];
        for row in dy.chunks(dout) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        db
    });
    ConvGrads { dx, dw, db }
}

/// Per-(sample, group) statistics saved by [`group_norm_forward`].
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm_forward<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    eps: T,
) -> (Vec<T>, GroupNormStats<T>) {
    let cpg = c / groups;
    let gsize = cpg * hw;
    let denom = T::from_f64(gsize as f64);
    let mut out = vec![T::zero(); x.len()];
    let mut mean = Vec::with_capacity(n * groups);
    let mut rstd = Vec::with_capacity(n * groups);
    for ni in 0..n {
        for gi in 0..groups {
            let base = (ni * c + gi * cpg) * hw;
            let seg = &x[base..base + gsize];
            let m = lane_sum(seg) / denom;
            let var = lane_sum_map(seg, |v| (v - m) * (v - m)) / denom;
            let r = T::one() / (var + eps).sqrt();
            mean.push(m);
            rstd.push(r);
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let (ga, be) = (gamma[ch], beta[ch]);
                let off = (ni * c + ch) * hw;
                for i in off..off + hw {
                    out[i] = (x[i] - m) * r * ga + be;
                }
            }
        }
    }
    (out, GroupNormStats { mean, rstd })
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_backward<T: Element>(
    x: &[T],
    gamma: &[T],
    stats: &GroupNormStats<T>,
    dy: &[T],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cpg = c / groups;
    let gsize = T::from_f64((cpg * hw) as f64);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ni in 0..n {
        for gi in 0..groups {
            let (m, r) = (stats.mean[ni * groups + gi], stats.rstd[ni * groups + gi]);
            // Sums of dxhat and dxhat * xhat over the group, from per-channel
            // sums of dy and dy * xhat.
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let off = (ni * c + ch) * hw;
                let dys = &dy[off..off + hw];
                let sum_dy = lane_sum(dys);
                let xs = &x[off..off + hw];
                let mut acc = [T::zero(); 8];
                let mut tail = T::zero();
                let (xc, dc) = (xs.chunks_exact(8), dys.chunks_exact(8));
                for (&xv, &dv) in xc.remainder().iter().zip(dc.remainder()) {
                    tail += dv * (xv - m);
                }
                for (xk, dk) in xc.zip(dc) {
                    for ((a, &xv), &dv) in acc.iter_mut().zip(xk).zip(dk) {
                        *a += dv * (xv - m);
                    }
                }
                let sum_dy_xhat = (lane_sum(&acc) + tail) * r;
                dgamma[ch] += sum_dy_xhat;
                dbeta[ch] += sum_dy;
                s1 += sum_dy * gamma[ch];
                s2 += sum_dy_xhat * gamma[ch];
            }
            let (s1, s2) = (s1 / gsize, s2 / gsize);
            for cc in 0..cpg {
                let ch = gi * cpg + cc;
                let off = (ni * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (x[i] - m) * r;
                    dx[i] = r * (dy[i] * gamma[ch] - s1 - xhat * s2);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x2 average pooling with stride 2 over `(planes, h, w)`.
pub fn avg_pool2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let v = src[y * ow + xx] * quarter;
                let i = 2 * y * w + 2 * xx;
                dst[i] = v;
                dst[i + 1] = v;
                dst[i + w] = v;
                dst[i + w + 1] = v;
            }
        }
    }
    dx
}

/// Nearest-neighbour 2x upsampling over `(planes, h, w)`.
pub fn upsample2<T: Element>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Element>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dy[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    dx
}

pub fn sigmoid<T: Element>(v: T) -> T {
    // exp(-v) overflowing to inf still yields the correct limit 0.
    T::one() / (T::one() + (-v).exp_fast())
}

/// Deterministic sum with eight interleaved partial accumulators.
pub fn lane_sum<T: Element>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += v;
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in tail {
        s += v;
    }
    s
}

/// [`lane_sum`] of `f(x)` without materializing the mapped values.
fn lane_sum_map<T: Element>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in tail {
        s += f(v);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], g: &ConvGeom, o: usize) -> Vec<f64> {
        let mut out = vec![0.0; g.n * o * g.oh * g.ow];
        for n in 0..g.n {
            for oc in 0..o {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let mut s = 0.0;
                        for c in 0..g.c {
                            for ki in 0..g.kh {
                                for kj in 0..g.kw {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                        s += x[((n * g.c + c) * g.h + iy as usize) * g.w + ix as usize]
                                            * w[((oc * g.c + c) * g.kh + ki) * g.kw + kj];
                                    }
                                }
                            }
                        }
                        out[((n * o + oc) * g.oh + oy) * g.ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_summation() {
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (2, 0, 2), (1, 0, 1), (2, 1, 4)] {
            let g = ConvGeom::new(2, 3, 7, 6, k, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 3 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let fast = conv2d_forward(&x, &w, None, &g, 4);
            let slow = naive_conv(&x, &w, &g, 4);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-10, "stride {stride} pad {pad} k {k}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 2, 5, 5, 3, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..g.n * g.c * g.h * g.w).map(|i| (i as f64).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&y, &g).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn transpose_geometry_restores_size() {
        let g = conv_transpose_geom(1, 3, 8, 8, 4, 4, 2, 1).unwrap();
        assert_eq!((g.h, g.w), (16, 16));
        assert_eq!((g.oh, g.ow), (8, 8));
        let g = conv_transpose_geom(1, 3, 8, 8, 3, 3, 1, 1).unwrap();
        assert_eq!((g.h, g.w), (8, 8));
    }

    #[test]
    fn pool_and_upsample_are_adjoint_up_to_scale() {
        let x: Vec<f64> = (0..32).map(|i| i as f64).collect();
        let up = upsample2(&x, 2, 4, 4);
        let back = avg_pool2(&up, 2, 8, 8);
        assert_eq!(back, x);
    }
}
