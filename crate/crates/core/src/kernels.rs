//! Forward and backward kernels on raw tensors.
//!
//! The autodiff graph in [`crate::autograd`] records which kernel produced a
//! value; frozen networks (encoders, metric feature extractors) call the
//! forward kernels directly.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// 2-D convolution geometry. Kernels are square and odd-sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    /// Columns wrap around (panoramic azimuth); rows are always zero-padded.
    pub wrap_w: bool,
}

impl ConvSpec {
    pub fn same(kernel: usize, wrap_w: bool) -> Self {
        Self {
            stride: 1,
            pad: kernel / 2,
            wrap_w,
        }
    }

    pub fn down(kernel: usize, wrap_w: bool) -> Self {
        Self {
            stride: 2,
            pad: kernel / 2,
            wrap_w,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize, k: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self, k: usize) -> bool {
        k == 1 && self.stride == 1 && self.pad == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

/// Output columns `[lo, hi)` whose source column `ox * stride + off` lies
/// inside `[0, w)`.
fn interior(wo: usize, w: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let hi = if (w as isize) <= off { 0 } else { ((w as isize - off) + s - 1) / s };
    let lo = (lo as usize).min(wo);
    (lo, (hi as usize).clamp(lo, wo))
}

/// Copies one tap row: `dst[ox] = src[ox * stride + off]`, wrapping or
/// zero-filling outside the row.
fn fill_row<T: Scalar>(src: &[T], dst: &mut [T], stride: usize, off: isize, wrap: bool) {
    let w = src.len();
    let (lo, hi) = interior(dst.len(), w, stride, off);
    let edge = |ox: usize| -> T {
        if wrap {
            src[(ox as isize * stride as isize + off).rem_euclid(w as isize) as usize]
        } else {
            T::zero()
        }
    };
    for ox in (0..lo).chain(hi..dst.len()) {
        dst[ox] = edge(ox);
    }
    if stride == 1 {
        let a = (lo as isize + off) as usize;
        dst[lo..hi].copy_from_slice(&src[a..a + hi - lo]);
    } else {
        for ox in lo..hi {
            dst[ox] = src[(ox as isize * stride as isize + off) as usize];
        }
    }
}

/// Adjoint of [`fill_row`]: `dst[ox * stride + off] += src[ox]`.
fn scatter_row<T: Scalar>(src: &[T], dst: &mut [T], stride: usize, off: isize, wrap: bool) {
    let w = dst.len();
    let (lo, hi) = interior(src.len(), w, stride, off);
    if wrap {
        for ox in (0..lo).chain(hi..src.len()) {
            dst[(ox as isize * stride as isize + off).rem_euclid(w as isize) as usize] += src[ox];
        }
    }
    if stride == 1 {
        let a = (lo as isize + off) as usize;
        for (d, &g) in dst[a..a + hi - lo].iter_mut().zip(&src[lo..hi]) {
            *d += g;
        }
    } else {
        for ox in lo..hi {
            dst[(ox as isize * stride as isize + off) as usize] += src[ox];
        }
    }
}

fn im2col<T: Scalar>(x: &[T], d: ConvDims, spec: ConvSpec, col: &mut [T]) {
    let n = d.ho * d.wo;
    for c in 0..d.ci {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut col[row * n..(row + 1) * n];
                let off = kj as isize - spec.pad as isize;
                for oy in 0..d.ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    let out_row = &mut dst[oy * d.wo..(oy + 1) * d.wo];
                    if iy < 0 || iy as usize >= d.h {
                        out_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    fill_row(src, out_row, spec.stride, off, spec.wrap_w);
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], d: ConvDims, spec: ConvSpec, dx: &mut [T]) {
    let n = d.ho * d.wo;
    for c in 0..d.ci {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &col[row * n..(row + 1) * n];
                let off = kj as isize - spec.pad as isize;
                for oy in 0..d.ho {
                    let iy = (oy * spec.stride + ki) as isize - spec.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * d.w..(iy as usize + 1) * d.w];
                    scatter_row(&src[oy * d.wo..(oy + 1) * d.wo], dst, spec.stride, off, spec.wrap_w);
                }
            }
        }
    }
}

fn conv_dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: ConvSpec) -> (usize, usize, ConvDims) {
    assert_eq!(x.ndim(), 4, "conv2d input must be [B,C,H,W]");
    assert_eq!(w.ndim(), 4, "conv2d weight must be [Co,Ci,k,k]");
    let (b, ci, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, wci, k) = (w.dim(0), w.dim(1), w.dim(2));
    assert_eq!(ci, wci, "conv2d channel mismatch");
    assert_eq!(k, w.dim(3), "conv2d kernel must be square");
    let (ho, wo) = spec.out_hw(h, wd, k);
    (
        b,
        co,
        ConvDims {
            ci,
            h,
            w: wd,
            k,
            ho,
            wo,
        },
    )
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    spec: ConvSpec,
) -> Tensor<T> {
    let (b, co, d) = conv_dims(x, w, spec);
    let n = d.ho * d.wo;
    let kk = d.ci * d.k * d.k;
    let mut out = Tensor::zeros(&[b, co, d.ho, d.wo]);
    let pointwise = spec.is_pointwise(d.k);
    let col_len = if pointwise { 0 } else { kk * n };
    let in_stride = d.ci * d.h * d.w;
    T::with_scratch(col_len, 0, |col, _| {
        for bi in 0..b {
            let xb = &x.data()[bi * in_stride..(bi + 1) * in_stride];
            let cols: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, d, spec, col);
                col
            };
            let ob = &mut out.data_mut()[bi * co * n..(bi + 1) * co * n];
            if let Some(bias) = bias {
                for (o, &bv) in ob.chunks_mut(n).zip(bias.data()) {
                    o.iter_mut().for_each(|v| *v = bv);
                }
            }
            T::gemm(co, kk, n, T::one(), w.data(), (kk, 1), cols, (n, 1), T::one(), ob, (n, 1));
        }
    });
    out
}

/// Gradients of [`conv2d`]; `dx` is only computed when requested.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: ConvSpec,
    dout: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let (b, co, d) = conv_dims(x, w, spec);
    let n = d.ho * d.wo;
    let kk = d.ci * d.k * d.k;
    let pointwise = spec.is_pointwise(d.k);
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let mut dx = if want_dx {
        Some(Tensor::zeros(x.shape()))
    } else {
        None
    };
    let col_len = if pointwise { 0 } else { kk * n };
    let dcol_len = if want_dx && !pointwise { kk * n } else { 0 };
    let in_stride = d.ci * d.h * d.w;
    T::with_scratch(col_len, dcol_len, |col, dcol| {
        for bi in 0..b {
            let xb = &x.data()[bi * in_stride..(bi + 1) * in_stride];
            let gb = &dout.data()[bi * co * n..(bi + 1) * co * n];
            for (o, g) in db.data_mut().iter_mut().zip(gb.chunks(n)) {
                *o += g.iter().copied().sum::<T>();
            }
            let cols: &[T] = if pointwise {
                xb
            } else {
                im2col(xb, d, spec, col);
                col
            };
            // dW[co, kk] += dout[co, n] * col[kk, n]^T
            T::gemm(co, n, kk, T::one(), gb, (n, 1), cols, (1, n), T::one(), dw.data_mut(), (kk, 1));
            if let Some(dx) = dx.as_mut() {
                let dxb = &mut dx.data_mut()[bi * in_stride..(bi + 1) * in_stride];
                if pointwise {
                    T::gemm(kk, co, n, T::one(), w.data(), (1, kk), gb, (n, 1), T::one(), dxb, (n, 1));
                } else {
                    // beta = 0: stale scratch contents are never read
                    T::gemm(kk, co, n, T::one(), w.data(), (1, kk), gb, (n, 1), T::zero(), dcol, (n, 1));
                    col2im(dcol, d, spec, dxb);
                }
            }
        }
    });
    (dx, dw, db)
}

/// `y = x W^T + b` over the last axis; `w` is `[out, in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let inp = *x.shape().last().expect("linear input rank >= 1");
    let (out_f, w_in) = (w.dim(0), w.dim(1));
    assert_eq!(inp, w_in, "linear feature mismatch");
    let rows = x.numel() / inp.max(1);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = out_f;
    let mut y = Tensor::zeros(&shape);
    if let Some(bias) = bias {
        for r in y.data_mut().chunks_mut(out_f) {
            r.copy_from_slice(bias.data());
        }
    }
    T::gemm(
        rows,
        inp,
        out_f,
        T::one(),
        x.data(),
        (inp, 1),
        w.data(),
        (1, inp),
        T::one(),
        y.data_mut(),
        (out_f, 1),
    );
    y
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let inp = *x.shape().last().unwrap();
    let out_f = w.dim(0);
    let rows = x.numel() / inp.max(1);
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(x.shape());
        T::gemm(
            rows,
            out_f,
            inp,
            T::one(),
            dy.data(),
            (out_f, 1),
            w.data(),
            (inp, 1),
            T::zero(),
            dx.data_mut(),
            (inp, 1),
        );
        dx
    });
    let mut dw = Tensor::zeros(w.shape());
    T::gemm(
        out_f,
        rows,
        inp,
        T::one(),
        dy.data(),
        (1, out_f),
        x.data(),
        (inp, 1),
        T::zero(),
        dw.data_mut(),
        (inp, 1),
    );
    let mut db = Tensor::zeros(&[out_f]);
    for r in dy.data().chunks(out_f) {
        for (o, &g) in db.data_mut().iter_mut().zip(r) {
            *o += g;
        }
    }
    (dx, dw, db)
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}


/// Saved statistics of a group-norm forward pass, per `(batch, group)`.
#[derive(Debug, Clone)]
pub struct GroupNormStats<T> {
    pub mean: Vec<T>,
    pub rstd: Vec<T>,
}

pub fn group_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
    eps: T,
) -> (Tensor<T>, GroupNormStats<T>) {
    let b = x.dim(0);
    let c = x.dim(1);
    assert_eq!(c % groups, 0, "channels must divide into groups");
    let spatial = x.numel() / (b * c).max(1);
    let cg = c / groups;
    let len = cg * spatial;
    let mut y = Tensor::zeros(x.shape());
    let mut mean = Vec::with_capacity(b * groups);
    let mut rstd = Vec::with_capacity(b * groups);
    let n = T::lit(len as f64);
    for bi in 0..b {
        for g in 0..groups {
            let off = (bi * c + g * cg) * spatial;
            let xs = &x.data()[off..off + len];
            let mu = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            mean.push(mu);
            rstd.push(r);
            let ys = &mut y.data_mut()[off..off + len];
            for ch in 0..cg {
                let gm = gamma.data()[g * cg + ch];
                let bt = beta.data()[g * cg + ch];
                for s in 0..spatial {
                    let i = ch * spatial + s;
                    ys[i] = (xs[i] - mu) * r * gm + bt;
                }
            }
        }
    }
    (y, GroupNormStats { mean, rstd })
}

pub fn group_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    groups: usize,
    stats: &GroupNormStats<T>,
    dy: &Tensor<T>,
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let b = x.dim(0);
    let c = x.dim(1);
    let spatial = x.numel() / (b * c).max(1);
    let cg = c / groups;
    let len = cg * spatial;
    let n = T::lit(len as f64);
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
    for bi in 0..b {
        for g in 0..groups {
            let idx = bi * groups + g;
            let (mu, r) = (stats.mean[idx], stats.rstd[idx]);
            let off = (bi * c + g * cg) * spatial;
            let xs = &x.data()[off..off + len];
            let gs = &dy.data()[off..off + len];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ch in 0..cg {
                let gm = gamma.data()[g * cg + ch];
                let mut dg = T::zero();
                let mut dbt = T::zero();
                for s in 0..spatial {
                    let i = ch * spatial + s;
                    let xhat = (xs[i] - mu) * r;
                    dg += gs[i] * xhat;
                    dbt += gs[i];
                    let dxh = gs[i] * gm;
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * xhat;
                }
                dgamma.data_mut()[g * cg + ch] += dg;
                dbeta.data_mut()[g * cg + ch] += dbt;
            }
            if let Some(dx) = dx.as_mut() {
                let m1 = sum_dxhat / n;
                let m2 = sum_dxhat_xhat / n;
                let ds = &mut dx.data_mut()[off..off + len];
                for ch in 0..cg {
                    let gm = gamma.data()[g * cg + ch];
                    for s in 0..spatial {
                        let i = ch * spatial + s;
                        let xhat = (xs[i] - mu) * r;
                        ds[i] = r * (gs[i] * gm - m1 - xhat * m2);
                    }
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// One axis of an align-corners-false bilinear resampling: `(i0, i1, frac)`.
pub fn bilinear_axis(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            (i0, i1, frac)
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (h, w) == (oh, ow) {
        return x.clone();
    }
    let ry = bilinear_axis(h, oh);
    let rx = bilinear_axis(w, ow);
    let mut y = Tensor::zeros(&[b, c, oh, ow]);
    for (plane_in, plane_out) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = plane_in[y0 * w + x0] * (T::one() - fx) + plane_in[y0 * w + x1] * fx;
                let bot = plane_in[y1 * w + x0] * (T::one() - fx) + plane_in[y1 * w + x1] * fx;
                plane_out[oy * ow + ox] = top * (T::one() - fy) + bot * fy;
            }
        }
    }
    y
}

pub fn resize_bilinear_backward<T: Scalar>(
    in_shape: &[usize],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (oh, ow) = (dy.dim(2), dy.dim(3));
    if (h, w) == (oh, ow) {
        return dy.clone();
    }
    let ry = bilinear_axis(h, oh);
    let rx = bilinear_axis(w, ow);
    let mut dx = Tensor::zeros(in_shape);
    for (plane_in, plane_out) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(oh * ow)) {
        for (oy, &(y0, y1, fy)) in ry.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in rx.iter().enumerate() {
                let fx = T::lit(fx);
                let g = plane_out[oy * ow + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane_in[y0 * w + x0] += gt * (T::one() - fx);
                plane_in[y0 * w + x1] += gt * fx;
                plane_in[y1 * w + x0] += gb * (T::one() - fx);
                plane_in[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}

/// Numerically stable in-place softmax over `logits`; returns false if empty.
pub fn softmax_in_place<T: Scalar>(logits: &mut [T]) -> bool {
    if logits.is_empty() {
        return false;
    }
    let m = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut z = T::zero();
    for l in logits.iter_mut() {
        *l = (*l - m).exp();
        z += *l;
    }
    for l in logits.iter_mut() {
        *l /= z;
    }
    true
}

/// Saved attention probabilities `[B, heads, N, M]`.
pub struct AttentionSaved<T> {
    pub probs: Vec<T>,
}

/// Multi-head dot-product attention on token tensors `q [B,N,C]`, `k, v [B,M,C]`.
pub fn attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, AttentionSaved<T>) {
    let (b, n, c) = (q.dim(0), q.dim(1), q.dim(2));
    let m = k.dim(1);
    assert_eq!(c % heads, 0, "channels must split evenly into heads");
    let dh = c / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Tensor::zeros(&[b, n, c]);
    let mut probs = vec![T::zero(); b * heads * n * m];
    for bi in 0..b {
        let qb = &q.data()[bi * n * c..(bi + 1) * n * c];
        let kb = &k.data()[bi * m * c..(bi + 1) * m * c];
        let vb = &v.data()[bi * m * c..(bi + 1) * m * c];
        let ob = &mut out.data_mut()[bi * n * c..(bi + 1) * n * c];
        for h in 0..heads {
            let p = &mut probs[((bi * heads + h) * n) * m..((bi * heads + h + 1) * n) * m];
            T::gemm(
                n,
                dh,
                m,
                scale,
                &qb[h * dh..],
                (c, 1),
                &kb[h * dh..],
                (1, c),
                T::zero(),
                p,
                (m, 1),
            );
            for row in p.chunks_mut(m) {
                softmax_in_place(row);
            }
            T::gemm(
                n,
                m,
                dh,
                T::one(),
                p,
                (m, 1),
                &vb[h * dh..],
                (c, 1),
                T::zero(),
                &mut ob[h * dh..],
                (c, 1),
            );
        }
    }
    (out, AttentionSaved { probs })
}

pub fn attention_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    saved: &AttentionSaved<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, n, c) = (q.dim(0), q.dim(1), q.dim(2));
    let m = k.dim(1);
    let dh = c / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(k.shape());
    let mut dv = Tensor::zeros(v.shape());
    let mut dp = vec![T::zero(); n * m];
    for bi in 0..b {
        let qb = &q.data()[bi * n * c..(bi + 1) * n * c];
        let kb = &k.data()[bi * m * c..(bi + 1) * m * c];
        let vb = &v.data()[bi * m * c..(bi + 1) * m * c];
        let gb = &dout.data()[bi * n * c..(bi + 1) * n * c];
        for h in 0..heads {
            let p = &saved.probs[((bi * heads + h) * n) * m..((bi * heads + h + 1) * n) * m];
            // dV = P^T dO
            T::gemm(
                m,
                n,
                dh,
                T::one(),
                p,
                (1, m),
                &gb[h * dh..],
                (c, 1),
                T::one(),
                &mut dv.data_mut()[bi * m * c + h * dh..],
                (c, 1),
            );
            // dP = dO V^T
            T::gemm(
                n,
                dh,
                m,
                T::one(),
                &gb[h * dh..],
                (c, 1),
                &vb[h * dh..],
                (1, c),
                T::zero(),
                &mut dp,
                (m, 1),
            );
            for (drow, prow) in dp.chunks_mut(m).zip(p.chunks(m)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            // dQ = dS K * scale ; dK = dS^T Q * scale
            T::gemm(
                n,
                m,
                dh,
                scale,
                &dp,
                (m, 1),
                &kb[h * dh..],
                (c, 1),
                T::one(),
                &mut dq.data_mut()[bi * n * c + h * dh..],
                (c, 1),
            );
            T::gemm(
                m,
                n,
                dh,
                scale,
                &dp,
                (1, m),
                &qb[h * dh..],
                (c, 1),
                T::one(),
                &mut dk.data_mut()[bi * m * c + h * dh..],
                (c, 1),
            );
        }
    }
    (dq, dk, dv)
}

/// `[B,C,H,W] -> [B,H*W,C]`
pub fn to_tokens<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c) = (x.dim(0), x.dim(1));
    let s = x.numel() / (b * c).max(1);
    let mut y = Tensor::zeros(&[b, s, c]);
    for bi in 0..b {
        let src = &x.data()[bi * c * s..(bi + 1) * c * s];
        let dst = &mut y.data_mut()[bi * c * s..(bi + 1) * c * s];
        for ch in 0..c {
            for p in 0..s {
                dst[p * c + ch] = src[ch * s + p];
            }
        }
    }
    y
}

/// `[B,S,C] -> [B,C,h,w]` with `S = h*w`.
pub fn from_tokens<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let (b, s, c) = (x.dim(0), x.dim(1), x.dim(2));
    assert_eq!(s, h * w, "token count must equal h*w");
    let mut y = Tensor::zeros(&[b, c, h, w]);
    for bi in 0..b {
        let src = &x.data()[bi * c * s..(bi + 1) * c * s];
        let dst = &mut y.data_mut()[bi * c * s..(bi + 1) * c * s];
        for p in 0..s {
            for ch in 0..c {
                dst[ch * s + p] = src[p * c + ch];
            }
        }
    }
    y
}

pub fn upsample2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut y = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    for (src, dst) in x.data().chunks(h * w).zip(y.data_mut().chunks_mut(4 * h * w)) {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Scalar>(in_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let mut dx = Tensor::zeros(in_shape);
    for (dst, src) in dx.data_mut().chunks_mut(h * w).zip(dy.data().chunks(4 * h * w)) {
        for i in 0..2 * h {
            for j in 0..2 * w {
                dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
            }
        }
    }
    dx
}

/// One bilinear tap into a (possibly multi-view) channel-last feature source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tap {
    pub view: u32,
    pub offset: u32,
    pub weight: f64,
}

/// Fixed sampling pattern: for every query point, `samples` sub-pixel
/// locations, each resolved into four bilinear taps.
#[derive(Debug, Clone, PartialEq)]
pub struct GatherPlan {
    pub points: usize,
    pub samples: usize,
    /// `(height, width)` of each source feature map.
    pub sources: Vec<(usize, usize)>,
    pub taps: Vec<Tap>,
}

impl GatherPlan {
    pub fn taps_for(&self, point: usize, sample: usize) -> &[Tap] {
        let i = (point * self.samples + sample) * 4;
        &self.taps[i..i + 4]
    }
}

/// Bilinear gather: sources `[B,C,H_v,W_v]` -> `[B,P,S,C]`.
pub fn gather_samples<T: Scalar>(sources: &[&Tensor<T>], plan: &GatherPlan) -> Tensor<T> {
    assert_eq!(sources.len(), plan.sources.len(), "gather: view count");
    let b = sources[0].dim(0);
    let c = sources[0].dim(1);
    let tokens: Vec<Tensor<T>> = sources.iter().map(|s| to_tokens(s)).collect();
    let (p, s) = (plan.points, plan.samples);
    let mut out = Tensor::zeros(&[b, p, s, c]);
    for bi in 0..b {
        let ob = &mut out.data_mut()[bi * p * s * c..(bi + 1) * p * s * c];
        for (slot, taps) in ob.chunks_mut(c).zip(plan.taps.chunks(4)) {
            for tap in taps {
                if tap.weight == 0.0 {
                    continue;
                }
                let tok = &tokens[tap.view as usize];
                let hw = tok.dim(1);
                let w = T::lit(tap.weight);
                let row = &tok.data()[(bi * hw + tap.offset as usize) * c..][..c];
                for (o, &v) in slot.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

pub fn gather_samples_backward<T: Scalar>(
    source_shapes: &[Vec<usize>],
    plan: &GatherPlan,
    dout: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let b = dout.dim(0);
    let c = dout.dim(3);
    let (p, s) = (plan.points, plan.samples);
    let mut dtok: Vec<Tensor<T>> = source_shapes
        .iter()
        .map(|sh| Tensor::zeros(&[b, sh[2] * sh[3], c]))
        .collect();
    for bi in 0..b {
        let gb = &dout.data()[bi * p * s * c..(bi + 1) * p * s * c];
        for (slot, taps) in gb.chunks(c).zip(plan.taps.chunks(4)) {
            for tap in taps {
                if tap.weight == 0.0 {
                    continue;
                }
                let tok = &mut dtok[tap.view as usize];
                let hw = tok.dim(1);
                let w = T::lit(tap.weight);
                let row = &mut tok.data_mut()[(bi * hw + tap.offset as usize) * c..][..c];
                for (o, &g) in row.iter_mut().zip(slot) {
                    *o += w * g;
                }
            }
        }
    }
    dtok.iter()
        .zip(source_shapes)
        .map(|(t, sh)| from_tokens(t, sh[2], sh[3]))
        .collect()
}

/// Per-point attention over a fixed candidate set with an additive logit
/// prior: `q [B,P,C]`, `kv [B,P,S,C]`, `prior`/`valid` of length `P*S`.
/// Keys and values are the same tensor. Points with no valid candidate
/// produce a zero output. Returns `(out, probs [B,P,H,S])`.
pub fn prior_attention<T: Scalar>(
    q: &Tensor<T>,
    kv: &Tensor<T>,
    prior: &[T],
    valid: &[bool],
    heads: usize,
) -> (Tensor<T>, Vec<T>) {
    let (b, p, c) = (q.dim(0), q.dim(1), q.dim(2));
    let s = kv.dim(2);
    assert_eq!(c % heads, 0, "channels must split evenly into heads");
    let dh = c / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut out = Tensor::zeros(&[b, p, c]);
    let mut probs = vec![T::zero(); b * p * heads * s];
    let mut logits = Vec::with_capacity(s);
    for bi in 0..b {
        for pi in 0..p {
            let qrow = &q.data()[(bi * p + pi) * c..][..c];
            let cand = &kv.data()[(bi * p + pi) * s * c..][..s * c];
            let pr = &prior[pi * s..(pi + 1) * s];
            let va = &valid[pi * s..(pi + 1) * s];
            if !va.iter().any(|&v| v) {
                continue;
            }
            for h in 0..heads {
                let qh = &qrow[h * dh..(h + 1) * dh];
                logits.clear();
                for si in 0..s {
                    if va[si] {
                        let kh = &cand[si * c + h * dh..si * c + (h + 1) * dh];
                        let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
                        logits.push(dot * scale + pr[si]);
                    }
                }
                softmax_in_place(&mut logits);
                let prow = &mut probs[((bi * p + pi) * heads + h) * s..][..s];
                let orow = &mut out.data_mut()[(bi * p + pi) * c + h * dh..][..dh];
                let mut j = 0;
                for si in 0..s {
                    if va[si] {
                        let a = logits[j];
                        j += 1;
                        prow[si] = a;
                        let vh = &cand[si * c + h * dh..si * c + (h + 1) * dh];
                        for (o, &v) in orow.iter_mut().zip(vh) {
                            *o += a * v;
                        }
                    }
                }
            }
        }
    }
    (out, probs)
}

pub fn prior_attention_backward<T: Scalar>(
    q: &Tensor<T>,
    kv: &Tensor<T>,
    probs: &[T],
    heads: usize,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (b, p, c) = (q.dim(0), q.dim(1), q.dim(2));
    let s = kv.dim(2);
    let dh = c / heads;
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.shape());
    let mut dkv = Tensor::zeros(kv.shape());
    let mut da = vec![T::zero(); s];
    for bi in 0..b {
        for pi in 0..p {
            let base = (bi * p + pi) * c;
            let qrow = &q.data()[base..base + c];
            let cand = &kv.data()[(bi * p + pi) * s * c..][..s * c];
            let grow = &dout.data()[base..base + c];
            for h in 0..heads {
                let prow = &probs[((bi * p + pi) * heads + h) * s..][..s];
                if prow.iter().all(|&a| a == T::zero()) {
                    continue;
                }
                let gh = &grow[h * dh..(h + 1) * dh];
                let qh = &qrow[h * dh..(h + 1) * dh];
                let mut dot = T::zero();
                for si in 0..s {
                    let vh = &cand[si * c + h * dh..si * c + (h + 1) * dh];
                    da[si] = gh.iter().zip(vh).map(|(&a, &b)| a * b).sum();
                    dot += da[si] * prow[si];
                }
                let dcand = &mut dkv.data_mut()[(bi * p + pi) * s * c..][..s * c];
                let dqh = &mut dq.data_mut()[base + h * dh..base + (h + 1) * dh];
                for si in 0..s {
                    let a = prow[si];
                    if a == T::zero() {
                        continue;
                    }
                    let dl = a * (da[si] - dot) * scale;
                    let vh = &cand[si * c + h * dh..si * c + (h + 1) * dh];
                    let dvh = &mut dcand[si * c + h * dh..si * c + (h + 1) * dh];
                    for j in 0..dh {
                        dvh[j] += a * gh[j] + dl * qh[j];
                        dqh[j] += dl * vh[j];
                    }
                }
            }
        }
    }
    (dq, dkv)
}
