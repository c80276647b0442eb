//! Tensor-level numeric kernels used by the tape.
//!
//! Everything here is a pure function from tensors to tensors. Gradient
//! rules are expressed as separate kernels so the tape can call them without
//! re-deriving anything.

use crate::error::{Error, Result};
use crate::tensor::{strides_of, Tensor};

// ---------------------------------------------------------------------------
// gemm

/// `c = alpha * a·b + beta * c` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs out of bounds");
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: out out of bounds");
    // SAFETY: the asserts above bound every address matrixmultiply touches,
    // and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

// ---------------------------------------------------------------------------
// broadcasting

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (right aligned), zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides_of(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                own[i - pad]
            }
        })
        .collect()
}

/// Visits every element of `out_shape` in row-major order, passing the
/// linear output index and the matching offsets into two broadcast inputs.
fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..total {
        f(lin, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape =
        broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dim(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |lin, oa, ob| data[lin] = f(ad[oa], bd[ob]));
    Ok(Tensor::from_parts(out_shape, data))
}

/// Sums `g` down to `shape`, undoing a broadcast.
pub(crate) fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let target = broadcast_strides(shape, g.shape());
    let zeros = vec![0; g.rank()];
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    let gd = g.data();
    for_each_broadcast(g.shape(), &target, &zeros, |lin, ot, _| out[ot] += gd[lin]);
    Tensor::from_parts(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// matmul

/// Batched matrix product over the last two axes, with optional transposition
/// of either operand and broadcasting over leading axes.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if a.rank() < 2 || b.rank() < 2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (ar, br) = (a.rank(), b.rank());
    let (a0, a1) = (a.shape()[ar - 2], a.shape()[ar - 1]);
    let (b0, b1) = (b.shape()[br - 2], b.shape()[br - 1]);
    let (p, q) = if ta { (a1, a0) } else { (a0, a1) };
    let (q2, r) = if tb { (b1, b0) } else { (b0, b1) };
    if q != q2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let batch_a = &a.shape()[..ar - 2];
    let batch_b = &b.shape()[..br - 2];
    let batch = broadcast_shape(batch_a, batch_b)
        .ok_or_else(|| Error::dim("matmul", a.shape(), b.shape()))?;
    let sa = broadcast_strides(batch_a, &batch);
    let sb = broadcast_strides(batch_b, &batch);
    let nbatch: usize = batch.iter().product();
    let mut out_shape = batch.clone();
    out_shape.extend([p, r]);
    let mut out = vec![0.0; nbatch * p * r];
    let (ma, mb) = (a0 * a1, b0 * b1);
    let sa_mat = if ta { (1, a1) } else { (a1, 1) };
    let sb_mat = if tb { (1, b1) } else { (b1, 1) };
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&batch, &sa, &sb, |lin, oa, ob| {
        let c = &mut out[lin * p * r..(lin + 1) * p * r];
        gemm(
            p,
            q,
            r,
            &ad[oa * ma..(oa + 1) * ma],
            sa_mat,
            &bd[ob * mb..(ob + 1) * mb],
            sb_mat,
            0.0,
            c,
            (r, 1),
        );
    });
    Ok(Tensor::from_parts(out_shape, out))
}

// ---------------------------------------------------------------------------
// attention

/// Key indices of one head sorted by content: rows `(k_j, v_j)` compared
/// lexicographically. Keys with equal rows are interchangeable, so any sum
/// taken in this order depends only on the multiset of keys.
fn canonical_key_order(k: &[f64], v: &[f64], d: usize, dv: usize) -> Vec<usize> {
    let lk = if d > 0 { k.len() / d } else { v.len() / dv.max(1) };
    let mut order: Vec<usize> = (0..lk).collect();
    order.sort_by(|&a, &b| {
        let ka = k[a * d..(a + 1) * d].iter().chain(&v[a * dv..(a + 1) * dv]);
        let kb = k[b * d..(b + 1) * d].iter().chain(&v[b * dv..(b + 1) * dv]);
        ka.zip(kb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Scaled dot-product attention per head for `q: [h, lq, d]`, `k: [h, lk, d]`,
/// `v: [h, lk, dv]`. Returns the `[h, lq, dv]` context and the `[h, lq, lk]`
/// attention weights. Softmax denominators and weighted sums run over the keys
/// in [`canonical_key_order`], so permuting keys and values together leaves
/// the output bit-for-bit unchanged.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Result<(Tensor, Tensor)> {
    let shapes_ok = q.rank() == 3
        && k.rank() == 3
        && v.rank() == 3
        && q.shape()[0] == k.shape()[0]
        && k.shape()[0] == v.shape()[0]
        && q.shape()[2] == k.shape()[2]
        && k.shape()[1] == v.shape()[1];
    if !shapes_ok {
        return Err(Error::dim("attention", q.shape(), k.shape()));
    }
    let (h, lq, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let (lk, dv) = (k.shape()[1], v.shape()[2]);
    let scores = matmul(q, k, false, true)?;
    if !scores.all_finite() {
        return Err(Error::Numeric("attention on non-finite input".into()));
    }
    let (sd, kd, vd) = (scores.data(), k.data(), v.data());
    let mut weights = vec![0.0; h * lq * lk];
    let mut ctx = vec![0.0; h * lq * dv];
    for hh in 0..h {
        let kh = &kd[hh * lk * d..(hh + 1) * lk * d];
        let vh = &vd[hh * lk * dv..(hh + 1) * lk * dv];
        let order = canonical_key_order(kh, vh, d, dv);
        for i in 0..lq {
            let row = &sd[(hh * lq + i) * lk..(hh * lq + i + 1) * lk];
            let w = &mut weights[(hh * lq + i) * lk..(hh * lq + i + 1) * lk];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(scale * x));
            let mut total = 0.0;
            for &j in &order {
                w[j] = (scale * row[j] - max).exp();
                total += w[j];
            }
            for x in w.iter_mut() {
                *x /= total;
            }
            let out = &mut ctx[(hh * lq + i) * dv..(hh * lq + i + 1) * dv];
            for &j in &order {
                for (o, &x) in out.iter_mut().zip(&vh[j * dv..(j + 1) * dv]) {
                    *o += w[j] * x;
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![h, lq, dv], ctx), Tensor::from_parts(vec![h, lq, lk], weights)))
}

// ---------------------------------------------------------------------------
// axis helpers

/// Splits a shape around `axis` into (outer, len, inner) counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn sum_axis(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; outer * inner];
    let xd = x.data();
    for o in 0..outer {
        for l in 0..len {
            let src = &xd[(o * len + l) * inner..(o * len + l + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::from_parts(shape, out)
}

/// Inverse of [`sum_axis`]'s reduction: repeats `g` `len` times along `axis`.
pub(crate) fn expand_axis(g: &Tensor, shape: &[usize], axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(shape, axis);
    let gd = g.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            out.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim("permute", x.shape(), axes));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
    let in_strides = x.strides();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zeros = vec![0; rank];
    let mut out = vec![0.0; x.len()];
    let xd = x.data();
    for_each_broadcast(&out_shape, &src_strides, &zeros, |lin, off, _| out[lin] = xd[off]);
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
    if axis >= first.rank() {
        return Err(Error::dim("concat", first.shape(), &[axis]));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape().iter().enumerate().all(|(i, &e)| i == axis || e == first.shape()[i]);
        if !ok {
            return Err(Error::dim("concat", first.shape(), p.shape()));
        }
        shape[axis] += p.shape()[axis];
    }
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn slice(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
        return Err(Error::dim("slice", x.shape(), &[axis, start, len]));
    }
    let (outer, full, inner) = split_axis(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`slice`]: embeds `g` into zeros of `shape`.
pub(crate) fn unslice(g: &Tensor, shape: &[usize], axis: usize, start: usize) -> Tensor {
    let (outer, full, inner) = split_axis(shape, axis);
    let len = g.shape()[axis];
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let base = (o * full + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// softmax / layer norm

pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if !x.all_finite() {
        return Err(Error::Numeric("softmax on non-finite input".into()));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| xd[at(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for l in 0..len {
                let e = (xd[at(l)] - max).exp();
                out[at(l)] = e;
                total += e;
            }
            for l in 0..len {
                out[at(l)] /= total;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// dx = y ⊙ (g − Σ_axis g⊙y)
pub(crate) fn softmax_backward(y: &Tensor, g: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), g.data());
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let s: f64 = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
            for l in 0..len {
                out[at(l)] = yd[at(l)] * (gd[at(l)] - s);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Normalized values and per-lane inverse standard deviations.
pub(crate) struct LayerNormCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &Tensor,
    axis: usize,
    gain: &Tensor,
    bias: &Tensor,
) -> Result<(Tensor, LayerNormCache)> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    if gain.shape() != [len] || bias.shape() != [len] {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    let xd = x.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(outer * inner);
    let (gd, bd) = (gain.data(), bias.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mean = (0..len).map(|l| xd[at(l)]).sum::<f64>() / len as f64;
            let var = (0..len).map(|l| (xd[at(l)] - mean).powi(2)).sum::<f64>() / len as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for l in 0..len {
                let h = (xd[at(l)] - mean) * inv;
                xhat[at(l)] = h;
                out[at(l)] = h * gd[l] + bd[l];
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::from_parts(shape.clone(), out),
        LayerNormCache {
            xhat: Tensor::from_parts(shape, xhat),
            inv_std,
        },
    ))
}

/// Returns (dx, dgain, dbias).
pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Tensor,
    g: &Tensor,
    axis: usize,
) -> (Tensor, Tensor, Tensor) {
    let shape = cache.xhat.shape();
    let (outer, len, inner) = split_axis(shape, axis);
    let (hd, gd, gn) = (cache.xhat.data(), g.data(), gain.data());
    let mut dx = vec![0.0; hd.len()];
    let mut dgain = vec![0.0; len];
    let mut dbias = vec![0.0; len];
    let n = len as f64;
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let inv = cache.inv_std[o * inner + i];
            let mut sum_dh = 0.0;
            let mut sum_dh_h = 0.0;
            for l in 0..len {
                let dh = gd[at(l)] * gn[l];
                sum_dh += dh;
                sum_dh_h += dh * hd[at(l)];
                dgain[l] += gd[at(l)] * hd[at(l)];
                dbias[l] += gd[at(l)];
            }
            for l in 0..len {
                let dh = gd[at(l)] * gn[l];
                dx[at(l)] = inv / n * (n * dh - sum_dh - hd[at(l)] * sum_dh_h);
            }
        }
    }
    (
        Tensor::from_parts(shape.to_vec(), dx),
        Tensor::from_parts(vec![len], dgain),
        Tensor::from_parts(vec![len], dbias),
    )
}

// ---------------------------------------------------------------------------
// convolution

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of a forward convolution reading a `channels×height×width` image.
    pub fn new(
        channels: usize,
        (height, width): (usize, usize),
        (kh, kw): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("convolution stride must be positive".into()));
        }
        let (ph, pw) = (height + 2 * pad, width + 2 * pad);
        if kh == 0 || kw == 0 || kh > ph || kw > pw {
            return Err(Error::Config(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input coordinate read by output (oy, ox) at kernel tap (ky, kx).
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width)
            .then_some((y as usize, x as usize))
    }
}

fn im2col(img: &[f64], geo: &ConvGeometry, cols: &mut [f64]) {
    let ncol = geo.col_cols();
    for c in 0..geo.channels {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                for oy in 0..geo.out_h {
                    for ox in 0..geo.out_w {
                        dst[oy * geo.out_w + ox] = match geo.source(oy, ox, ky, kx) {
                            Some((y, x)) => img[(c * geo.height + y) * geo.width + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], geo: &ConvGeometry, img: &mut [f64]) {
    let ncol = geo.col_cols();
    for c in 0..geo.channels {
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = (c * geo.kh + ky) * geo.kw + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                for oy in 0..geo.out_h {
                    for ox in 0..geo.out_w {
                        if let Some((y, x)) = geo.source(oy, ox, ky, kx) {
                            img[(c * geo.height + y) * geo.width + x] += src[oy * geo.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes(op: &'static str, x: &Tensor, w: &Tensor, x_channels_axis_of_w: usize) -> Result<()> {
    if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[x_channels_axis_of_w] {
        return Err(Error::dim(op, x.shape(), w.shape()));
    }
    Ok(())
}

/// Cross-correlation of `x [B,C,H,W]` with `w [O,C,kh,kw]` via im2col + gemm.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_shapes("conv2d", x, w, 1)?;
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let geo = ConvGeometry::new(c, (h, wd), (kh, kw), stride, pad)?;
    let (rows, ncol) = (geo.col_rows(), geo.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; b * o * ncol];
    let img_len = c * h * wd;
    for bi in 0..b {
        im2col(&x.data()[bi * img_len..(bi + 1) * img_len], &geo, &mut cols);
        gemm(
            o,
            rows,
            ncol,
            w.data(),
            (rows, 1),
            &cols,
            (ncol, 1),
            0.0,
            &mut out[bi * o * ncol..(bi + 1) * o * ncol],
            (ncol, 1),
        );
    }
    Ok(Tensor::from_parts(vec![b, o, geo.out_h, geo.out_w], out))
}

/// Reference convolution written as plain nested loops.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_shapes("conv2d", x, w, 1)?;
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let geo = ConvGeometry::new(c, (h, wd), (kh, kw), stride, pad)?;
    let mut out = Tensor::zeros(&[b, o, geo.out_h, geo.out_w]);
    for bi in 0..b {
        for oc in 0..o {
            for oy in 0..geo.out_h {
                for ox in 0..geo.out_w {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                                    acc += x.at(&[bi, ic, y, xx]) * w.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out.set(&[bi, oc, oy, ox], acc);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients of conv2d with respect to input and weight.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let geo = ConvGeometry::new(c, (h, wd), (kh, kw), stride, pad).expect("validated in forward");
    let (rows, ncol) = (geo.col_rows(), geo.col_cols());
    let img_len = c * h * wd;
    let mut cols = vec![0.0; rows * ncol];
    let mut dx = need.0.then(|| vec![0.0; x.len()]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    for bi in 0..b {
        let gb = &g.data()[bi * o * ncol..(bi + 1) * o * ncol];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[bi * img_len..(bi + 1) * img_len], &geo, &mut cols);
            // dW += G · colsᵀ
            gemm(o, ncol, rows, gb, (ncol, 1), &cols, (1, ncol), 1.0, dw, (rows, 1));
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = Wᵀ · G
            gemm(rows, o, ncol, w.data(), (1, rows), gb, (ncol, 1), 0.0, &mut cols, (ncol, 1));
            col2im(&cols, &geo, &mut dx[bi * img_len..(bi + 1) * img_len]);
        }
    }
    (
        dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    )
}

/// Output extent of a transposed convolution.
pub fn conv_transpose_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let full = (input.saturating_sub(1)) * stride + k;
    if input == 0 || full <= 2 * pad {
        return Err(Error::Config(format!(
            "transposed convolution collapses: input {input}, kernel {k}, stride {stride}, pad {pad}"
        )));
    }
    Ok(full - 2 * pad)
}

/// Adjoint of [`conv2d`]: maps `y [B,O,h,w]` to `[B,C,H,W]` with
/// `H = (h−1)·stride − 2·pad + kh`, using the same `w [O,C,kh,kw]`.
pub fn conv_transpose2d(y: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    check_conv_shapes("conv_transpose2d", y, w, 0)?;
    let (b, o, hi, wi) = (y.shape()[0], y.shape()[1], y.shape()[2], y.shape()[3]);
    let (c, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let h = conv_transpose_extent(hi, kh, stride, pad)?;
    let wd = conv_transpose_extent(wi, kw, stride, pad)?;
    let geo = ConvGeometry::new(c, (h, wd), (kh, kw), stride, pad)?;
    if geo.out_h != hi || geo.out_w != wi {
        return Err(Error::dim("conv_transpose2d", y.shape(), w.shape()));
    }
    let (rows, ncol) = (geo.col_rows(), geo.col_cols());
    let mut cols = vec![0.0; rows * ncol];
    let img_len = c * h * wd;
    let mut out = vec![0.0; b * img_len];
    for bi in 0..b {
        let yb = &y.data()[bi * o * ncol..(bi + 1) * o * ncol];
        gemm(rows, o, ncol, w.data(), (1, rows), yb, (ncol, 1), 0.0, &mut cols, (ncol, 1));
        col2im(&cols, &geo, &mut out[bi * img_len..(bi + 1) * img_len]);
    }
    Ok(Tensor::from_parts(vec![b, c, h, wd], out))
}

pub(crate) fn conv_transpose2d_backward(
    y: &Tensor,
    w: &Tensor,
    g: &Tensor,
    stride: usize,
    pad: usize,
    need: (bool, bool),
) -> (Option<Tensor>, Option<Tensor>) {
    let (b, o) = (y.shape()[0], y.shape()[1]);
    let (c, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let (h, wd) = (g.shape()[2], g.shape()[3]);
    let geo = ConvGeometry::new(c, (h, wd), (kh, kw), stride, pad).expect("validated in forward");
    let (rows, ncol) = (geo.col_rows(), geo.col_cols());
    let img_len = c * h * wd;
    let mut cols = vec![0.0; rows * ncol];
    let mut dy = need.0.then(|| vec![0.0; y.len()]);
    let mut dw = need.1.then(|| vec![0.0; w.len()]);
    for bi in 0..b {
        im2col(&g.data()[bi * img_len..(bi + 1) * img_len], &geo, &mut cols);
        if let Some(dy) = dy.as_mut() {
            // dY = W · cols(g)
            gemm(o, rows, ncol, w.data(), (rows, 1), &cols, (ncol, 1), 0.0,
                &mut dy[bi * o * ncol..(bi + 1) * o * ncol], (ncol, 1));
        }
        if let Some(dw) = dw.as_mut() {
            // dW += Y · cols(g)ᵀ
            let yb = &y.data()[bi * o * ncol..(bi + 1) * o * ncol];
            gemm(o, ncol, rows, yb, (ncol, 1), &cols, (1, ncol), 1.0, dw, (rows, 1));
        }
    }
    (
        dy.map(|d| Tensor::from_parts(y.shape().to_vec(), d)),
        dw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
    )
}

// ---------------------------------------------------------------------------
// bilinear sampling

/// Precomputed bilinear taps for a fixed set of sample points on an
/// `H×W` plane. Points outside `[0,W−1]×[0,H−1]` have no taps and sample 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleTable {
    height: usize,
    width: usize,
    taps: Vec<[(usize, f64); 4]>,
    valid: Vec<bool>,
}

impl SampleTable {
    pub fn new(height: usize, width: usize, points: &[(f64, f64)]) -> Self {
        let mut taps = Vec::with_capacity(points.len());
        let mut valid = Vec::with_capacity(points.len());
        for &(u, v) in points {
            let inside = u.is_finite()
                && v.is_finite()
                && u >= 0.0
                && v >= 0.0
                && u <= (width - 1) as f64
                && v <= (height - 1) as f64;
            if !inside {
                taps.push([(0, 0.0); 4]);
                valid.push(false);
                continue;
            }
            let x0 = (u.floor() as usize).min(width - 1);
            let y0 = (v.floor() as usize).min(height - 1);
            let x1 = (x0 + 1).min(width - 1);
            let y1 = (y0 + 1).min(height - 1);
            let fx = u - x0 as f64;
            let fy = v - y0 as f64;
            taps.push([
                (y0 * width + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * width + x1, fx * (1.0 - fy)),
                (y1 * width + x0, (1.0 - fx) * fy),
                (y1 * width + x1, fx * fy),
            ]);
            valid.push(true);
        }
        Self {
            height,
            width,
            taps,
            valid,
        }
    }

    pub fn points(&self) -> usize {
        self.taps.len()
    }

    pub fn plane(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn is_valid(&self, point: usize) -> bool {
        self.valid[point]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// `feat [C,H,W]` → `[C,P]`.
    pub fn sample(&self, feat: &Tensor) -> Result<Tensor> {
        if feat.rank() != 3 || feat.shape()[1] != self.height || feat.shape()[2] != self.width {
            return Err(Error::dim("bilinear_sample", feat.shape(), &[self.height, self.width]));
        }
        let c = feat.shape()[0];
        let plane = self.height * self.width;
        let p = self.taps.len();
        let mut out = vec![0.0; c * p];
        for ch in 0..c {
            let src = &feat.data()[ch * plane..(ch + 1) * plane];
            let dst = &mut out[ch * p..(ch + 1) * p];
            for (i, taps) in self.taps.iter().enumerate() {
                if self.valid[i] {
                    dst[i] = taps.iter().map(|&(ix, wt)| src[ix] * wt).sum();
                }
            }
        }
        Ok(Tensor::from_parts(vec![c, p], out))
    }

    pub(crate) fn sample_backward(&self, g: &Tensor) -> Tensor {
        let c = g.shape()[0];
        let plane = self.height * self.width;
        let p = self.taps.len();
        let mut out = vec![0.0; c * plane];
        for ch in 0..c {
            let src = &g.data()[ch * p..(ch + 1) * p];
            let dst = &mut out[ch * plane..(ch + 1) * plane];
            for (i, taps) in self.taps.iter().enumerate() {
                if self.valid[i] {
                    for &(ix, wt) in taps {
                        dst[ix] += wt * src[i];
                    }
                }
            }
        }
        Tensor::from_parts(vec![c, self.height, self.width], out)
    }
}

// ---------------------------------------------------------------------------
// elementwise functions

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Per-pixel sigmoid focal loss and its derivative with respect to the logit.
///
/// With `z = x` for positives and `z = −x` for negatives, `p_t = σ(z)` and
/// the loss is `σ(−z)^γ · softplus(−z)`.
pub(crate) fn focal_term(logit: f64, target: f64, gamma: f64) -> (f64, f64) {
    let sign = if target > 0.5 { 1.0 } else { -1.0 };
    let z = sign * logit;
    let s = sigmoid(-z);
    let sp = softplus(-z);
    let sg = if gamma == 0.0 { 1.0 } else { s.powf(gamma) };
    let loss = sg * sp;
    let sgm1 = if gamma == 0.0 { 0.0 } else { gamma * s.powf(gamma - 1.0) };
    // d/dz [s^γ·sp] = −s(1−s)·γ s^{γ−1}·sp − s^γ·s
    let dz = -s * (1.0 - s) * sgm1 * sp - sg * s;
    (loss, sign * dz)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::ones(&[2, 3, 4]);
        let r = reduce_to_shape(&g, &[3, 1]);
        assert_eq!(r.shape(), &[3, 1]);
        assert!(r.data().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn conv_geometry_rejects_degenerate() {
        assert!(ConvGeometry::new(1, (2, 2), (5, 5), 1, 0).is_err());
        assert!(ConvGeometry::new(1, (2, 2), (3, 3), 0, 1).is_err());
        let g = ConvGeometry::new(1, (48, 48), (3, 3), 2, 1).unwrap();
        assert_eq!((g.out_h, g.out_w), (24, 24));
    }

    #[test]
    fn transpose_extent() {
        assert_eq!(conv_transpose_extent(6, 4, 2, 1).unwrap(), 12);
        assert_eq!(conv_transpose_extent(1, 2, 2, 0).unwrap(), 2);
        assert!(conv_transpose_extent(1, 1, 1, 1).is_err());
    }

    #[test]
    fn focal_gamma_zero_is_bce() {
        for &(x, y) in &[(0.3, 1.0), (-2.0, 0.0), (4.0, 0.0), (-30.0, 1.0)] {
            let (l, _) = focal_term(x, y, 0.0);
            let p = sigmoid(x);
            let bce = if y > 0.5 { -p.ln() } else { -(1.0 - p).ln() };
            assert!((l - bce).abs() < 1e-12 * bce.max(1.0), "{x} {y}: {l} vs {bce}");
        }
    }
}
