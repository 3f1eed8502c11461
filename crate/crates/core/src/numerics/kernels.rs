//! Slice-level forward and backward kernels behind the graph operations.
//!
//! Convolutions are lowered to GEMM through im2col; transposed convolution is
//! the adjoint of the matching forward convolution and reuses its gather and
//! scatter routines.

use super::real::{gemm, View};
use super::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv1dGeom {
    pub n: usize,
    pub cin: usize,
    pub len: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub lout: usize,
}

/// Gathers `[c·k, n·lout]` patches from `x` laid out as `[n, c, len]`.
pub(crate) fn im2col1d<T: Real>(
    x: &[T],
    n: usize,
    c: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<T> {
    let ncol = n * lout;
    let mut cols = vec![T::zero(); c * k * ncol];
    for ci in 0..c {
        for kk in 0..k {
            let row = &mut cols[(ci * k + kk) * ncol..(ci * k + kk + 1) * ncol];
            for b in 0..n {
                let src = &x[(b * c + ci) * len..(b * c + ci + 1) * len];
                let dst = &mut row[b * lout..(b + 1) * lout];
                for (t, d) in dst.iter_mut().enumerate() {
                    let pos = (t * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col1d`]: scatters patches back into `[n, c, len]`.
pub(crate) fn col2im1d<T: Real>(
    cols: &[T],
    n: usize,
    c: usize,
    len: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
) -> Vec<T> {
    let ncol = n * lout;
    let mut x = vec![T::zero(); n * c * len];
    for ci in 0..c {
        for kk in 0..k {
            let row = &cols[(ci * k + kk) * ncol..(ci * k + kk + 1) * ncol];
            for b in 0..n {
                let dst = &mut x[(b * c + ci) * len..(b * c + ci + 1) * len];
                let src = &row[b * lout..(b + 1) * lout];
                for (t, &v) in src.iter().enumerate() {
                    let pos = (t * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        dst[pos as usize] += v;
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, l]` → `[c, n·l]`.
fn channels_first<T: Real>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[ci * n * l + b * l..ci * n * l + (b + 1) * l]
                .copy_from_slice(&x[(b * c + ci) * l..(b * c + ci + 1) * l]);
        }
    }
    out
}

/// `[c, n·l]` → `[n, c, l]`.
fn batch_first<T: Real>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ci in 0..c {
            out[(b * c + ci) * l..(b * c + ci + 1) * l]
                .copy_from_slice(&x[ci * n * l + b * l..ci * n * l + (b + 1) * l]);
        }
    }
    out
}

fn add_channel_bias<T: Real>(out: &mut [T], bias: &[T], n: usize, c: usize, l: usize) {
    for b in 0..n {
        for ci in 0..c {
            let bv = bias[ci];
            for v in &mut out[(b * c + ci) * l..(b * c + ci + 1) * l] {
                *v += bv;
            }
        }
    }
}

fn channel_sums<T: Real>(g: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut db = vec![T::zero(); c];
    for b in 0..n {
        for (ci, d) in db.iter_mut().enumerate() {
            *d += g[(b * c + ci) * l..(b * c + ci + 1) * l].iter().copied().sum::<T>();
        }
    }
    db
}

pub(crate) fn conv1d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: Conv1dGeom) -> Vec<T> {
    let cols = im2col1d(x, g.n, g.cin, g.len, g.k, g.stride, g.pad, g.lout);
    let ncol = g.n * g.lout;
    let ck = g.cin * g.k;
    let mut tmp = vec![T::zero(); g.cout * ncol];
    gemm(g.cout, ck, ncol, T::one(), w, View::rows(0, ck), &cols, View::rows(0, ncol), T::zero(), &mut tmp, View::rows(0, ncol));
    let mut out = batch_first(&tmp, g.n, g.cout, g.lout);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.n, g.cout, g.lout);
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv1d_backward<T: Real>(x: &[T], w: &[T], gout: &[T], g: Conv1dGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ncol = g.n * g.lout;
    let ck = g.cin * g.k;
    let cols = im2col1d(x, g.n, g.cin, g.len, g.k, g.stride, g.pad, g.lout);
    let gt = channels_first(gout, g.n, g.cout, g.lout);
    let mut dw = vec![T::zero(); g.cout * ck];
    gemm(g.cout, ncol, ck, T::one(), &gt, View::rows(0, ncol), &cols, View::trans(0, ncol), T::zero(), &mut dw, View::rows(0, ck));
    let mut dcols = vec![T::zero(); ck * ncol];
    gemm(ck, g.cout, ncol, T::one(), w, View::trans(0, ck), &gt, View::rows(0, ncol), T::zero(), &mut dcols, View::rows(0, ncol));
    let dx = col2im1d(&dcols, g.n, g.cin, g.len, g.k, g.stride, g.pad, g.lout);
    let db = channel_sums(gout, g.n, g.cout, g.lout);
    (dx, dw, db)
}

/// Transposed convolution. `g` describes the *adjoint* forward convolution:
/// `g.cin`/`g.len` are the output channels/length, `g.cout`/`g.lout` the input
/// channels/length. Weight layout is `[in_channels, out_channels, k]`.
pub(crate) fn conv_t1d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: Conv1dGeom) -> Vec<T> {
    let (cin, l, cout) = (g.cout, g.lout, g.cin);
    let ncol = g.n * l;
    let ck = cout * g.k;
    let xt = channels_first(x, g.n, cin, l);
    let mut cols = vec![T::zero(); ck * ncol];
    gemm(ck, cin, ncol, T::one(), w, View::trans(0, ck), &xt, View::rows(0, ncol), T::zero(), &mut cols, View::rows(0, ncol));
    let mut out = col2im1d(&cols, g.n, cout, g.len, g.k, g.stride, g.pad, l);
    if let Some(b) = bias {
        add_channel_bias(&mut out, b, g.n, cout, g.len);
    }
    out
}

pub(crate) fn conv_t1d_backward<T: Real>(x: &[T], w: &[T], gout: &[T], g: Conv1dGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (cin, l, cout) = (g.cout, g.lout, g.cin);
    let ncol = g.n * l;
    let ck = cout * g.k;
    let dcols = im2col1d(gout, g.n, cout, g.len, g.k, g.stride, g.pad, l);
    let mut dxt = vec![T::zero(); cin * ncol];
    gemm(cin, ck, ncol, T::one(), w, View::rows(0, ck), &dcols, View::rows(0, ncol), T::zero(), &mut dxt, View::rows(0, ncol));
    let dx = batch_first(&dxt, g.n, cin, l);
    let xt = channels_first(x, g.n, cin, l);
    let mut dw = vec![T::zero(); cin * ck];
    gemm(cin, ncol, ck, T::one(), &xt, View::rows(0, ncol), &dcols, View::trans(0, ncol), T::zero(), &mut dw, View::rows(0, ck));
    let db = channel_sums(gout, g.n, cout, g.len);
    (dx, dw, db)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    /// top, bottom, left, right
    pub pad: [usize; 4],
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

impl Conv2dGeom {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
    fn patch(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pad == [0; 4]
    }
}

/// Patches of one sample and group: `[cin_g·kh·kw, hout·wout]`.
fn im2col2d<T: Real>(x: &[T], b: usize, gi: usize, g: &Conv2dGeom, cols: &mut [T]) {
    let hw = g.hout * g.wout;
    let cin_g = g.cin_g();
    let [pt, _, pl, _] = g.pad;
    cols.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..cin_g {
        let chan = &x[((b * g.cin) + gi * cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut cols[((ci * g.kh + i) * g.kw + j) * hw..][..hw];
                for oh in 0..g.hout {
                    let r = (oh * g.sh + i) as isize - pt as isize;
                    if r < 0 || r as usize >= g.h {
                        continue;
                    }
                    let src = &chan[r as usize * g.w..][..g.w];
                    let dst = &mut row[oh * g.wout..][..g.wout];
                    if g.sw == 1 {
                        // contiguous run of valid columns
                        let shift = j as isize - pl as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.wout as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let c = (ow * g.sw + j) as isize - pl as isize;
                            if c >= 0 && (c as usize) < g.w {
                                *d = src[c as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im2d<T: Real>(cols: &[T], b: usize, gi: usize, g: &Conv2dGeom, dx: &mut [T]) {
    let hw = g.hout * g.wout;
    let cin_g = g.cin_g();
    let [pt, _, pl, _] = g.pad;
    for ci in 0..cin_g {
        let chan = &mut dx[((b * g.cin) + gi * cin_g + ci) * g.h * g.w..][..g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &cols[((ci * g.kh + i) * g.kw + j) * hw..][..hw];
                for oh in 0..g.hout {
                    let r = (oh * g.sh + i) as isize - pt as isize;
                    if r < 0 || r as usize >= g.h {
                        continue;
                    }
                    let dst = &mut chan[r as usize * g.w..][..g.w];
                    let src = &row[oh * g.wout..][..g.wout];
                    if g.sw == 1 {
                        let shift = j as isize - pl as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.wout as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + shift) as usize;
                            for (d, &v) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ow, &v) in src.iter().enumerate() {
                            let c = (ow * g.sw + j) as isize - pl as isize;
                            if c >= 0 && (c as usize) < g.w {
                                dst[c as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(x: &[T], w: &[T], bias: Option<&[T]>, g: Conv2dGeom) -> Vec<T> {
    let hw = g.hout * g.wout;
    let (cout_g, patch) = (g.cout_g(), g.patch());
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    let mut cols = vec![T::zero(); patch * hw];
    for b in 0..g.n {
        for gi in 0..g.groups {
            let wv = View::rows(gi * cout_g * patch, patch);
            let ov = View::rows((b * g.cout + gi * cout_g) * hw, hw);
            if g.is_pointwise() {
                let xv = View::rows((b * g.cin + gi * g.cin_g()) * hw, hw);
                gemm(cout_g, patch, hw, T::one(), w, wv, x, xv, T::zero(), &mut out, ov);
            } else {
                im2col2d(x, b, gi, &g, &mut cols);
                gemm(cout_g, patch, hw, T::one(), w, wv, &cols, View::rows(0, hw), T::zero(), &mut out, ov);
            }
        }
    }
    if let Some(bv) = bias {
        add_channel_bias(&mut out, bv, g.n, g.cout, hw);
    }
    out
}

pub(crate) fn conv2d_backward<T: Real>(x: &[T], w: &[T], gout: &[T], g: Conv2dGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = g.hout * g.wout;
    let (cout_g, patch) = (g.cout_g(), g.patch());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut cols = vec![T::zero(); patch * hw];
    let mut dcols = vec![T::zero(); patch * hw];
    for b in 0..g.n {
        for gi in 0..g.groups {
            let wv = View::rows(gi * cout_g * patch, patch);
            let gv = View::rows((b * g.cout + gi * cout_g) * hw, hw);
            if g.is_pointwise() {
                let xoff = (b * g.cin + gi * g.cin_g()) * hw;
                gemm(cout_g, hw, patch, T::one(), gout, gv, x, View::trans(xoff, hw), T::one(), &mut dw, wv);
                gemm(patch, cout_g, hw, T::one(), w, View::trans(gi * cout_g * patch, patch), gout, gv, T::one(), &mut dx, View::rows(xoff, hw));
            } else {
                im2col2d(x, b, gi, &g, &mut cols);
                gemm(cout_g, hw, patch, T::one(), gout, gv, &cols, View::trans(0, hw), T::one(), &mut dw, wv);
                gemm(patch, cout_g, hw, T::one(), w, View::trans(gi * cout_g * patch, patch), gout, gv, T::zero(), &mut dcols, View::rows(0, hw));
                col2im2d(&dcols, b, gi, &g, &mut dx);
            }
        }
    }
    let db = channel_sums(gout, g.n, g.cout, hw);
    (dx, dw, db)
}

/// Non-overlapping average pooling over the last two axes of `[n, c, h, w]`.
pub(crate) fn avg_pool2d_forward<T: Real>(x: &[T], nc: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ho, wo) = (h / kh, w / kw);
    let scale = T::one() / T::lit((kh * kw) as f64);
    let mut out = vec![T::zero(); nc * ho * wo];
    for p in 0..nc {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for oh in 0..ho {
            for i in 0..kh {
                let row = &src[(oh * kh + i) * w..][..w];
                for ow in 0..wo {
                    let s: T = row[ow * kw..ow * kw + kw].iter().copied().sum();
                    dst[oh * wo + ow] += s;
                }
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

pub(crate) fn avg_pool2d_backward<T: Real>(gout: &[T], nc: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ho, wo) = (h / kh, w / kw);
    let scale = T::one() / T::lit((kh * kw) as f64);
    let mut dx = vec![T::zero(); nc * h * w];
    for p in 0..nc {
        let g = &gout[p * ho * wo..][..ho * wo];
        let dst = &mut dx[p * h * w..][..h * w];
        for oh in 0..ho {
            for i in 0..kh {
                let row = &mut dst[(oh * kh + i) * w..][..w];
                for ow in 0..wo {
                    let v = g[oh * wo + ow] * scale;
                    row[ow * kw..ow * kw + kw].iter_mut().for_each(|d| *d = v);
                }
            }
        }
    }
    dx
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttnGeom {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnGeom {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head scaled dot-product attention on `[batch, len, dim]` inputs.
/// Returns `(output, probabilities)` with probabilities `[batch, heads, len, len]`.
pub(crate) fn attention_forward<T: Real>(q: &[T], k: &[T], v: &[T], g: AttnGeom) -> (Vec<T>, Vec<T>) {
    let (t, e, dh) = (g.len, g.dim, g.head_dim());
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut probs = vec![T::zero(); g.batch * g.heads * t * t];
    let mut out = vec![T::zero(); g.batch * t * e];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let off = b * t * e + h * dh;
            let poff = (b * g.heads + h) * t * t;
            gemm(t, dh, t, scale, q, View::strided(off, e, 1), k, View::strided(off, 1, e), T::zero(), &mut probs, View::rows(poff, t));
            for row in probs[poff..poff + t * t].chunks_exact_mut(t) {
                softmax_in_place(row);
            }
            gemm(t, t, dh, T::one(), &probs, View::rows(poff, t), v, View::strided(off, e, 1), T::zero(), &mut out, View::strided(off, e, 1));
        }
    }
    (out, probs)
}

/// Returns `(dq, dk, dv)`.
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    gout: &[T],
    g: AttnGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (t, e, dh) = (g.len, g.dim, g.head_dim());
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); t * t];
    for b in 0..g.batch {
        for h in 0..g.heads {
            let off = b * t * e + h * dh;
            let poff = (b * g.heads + h) * t * t;
            let hv = View::strided(off, e, 1);
            // dV = Pᵀ dO
            gemm(t, t, dh, T::one(), probs, View::trans(poff, t), gout, hv, T::zero(), &mut dv, hv);
            // dP = dO Vᵀ
            gemm(t, dh, t, T::one(), gout, hv, v, View::strided(off, 1, e), T::zero(), &mut ds, View::rows(0, t));
            let p = &probs[poff..poff + t * t];
            for (drow, prow) in ds.chunks_exact_mut(t).zip(p.chunks_exact(t)) {
                let dot: T = drow.iter().zip(prow).map(|(&d, &pp)| d * pp).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot) * scale;
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            gemm(t, t, dh, T::one(), &ds, View::rows(0, t), k, hv, T::zero(), &mut dq, hv);
            gemm(t, t, dh, T::one(), &ds, View::trans(0, t), q, hv, T::zero(), &mut dk, hv);
        }
    }
    (dq, dk, dv)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}
