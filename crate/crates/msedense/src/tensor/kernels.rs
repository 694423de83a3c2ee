//! Numerical kernels for convolution, batch normalization, pooling, and
//! dense layers.
//!
//! Every kernel parallelizes over the batch dimension only: each sample's
//! output slice is written by exactly one worker, and reductions across the
//! batch (weight gradients, batch statistics) are computed as per-sample
//! partials folded in sample order. The parallel and sequential paths
//! therefore produce bitwise-identical results.

use super::TensorError;
use crate::element::Element;
use crate::parallel;

/// Spatial padding scheme for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad so that `out = ceil(in / stride)`, with any odd padding going to
    /// the bottom and right edges.
    Same,
    /// No padding; the kernel must fit inside the input.
    Valid,
}

/// Output size and implicit top-left padding of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

pub fn conv_output_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: Padding,
) -> Result<ConvGeometry, TensorError> {
    if stride == 0 {
        return Err(TensorError::NonPositiveStride { op: "conv2d" });
    }
    match padding {
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(TensorError::KernelTooLarge { kh, kw, h, w });
            }
            Ok(ConvGeometry {
                out_h: (h - kh) / stride + 1,
                out_w: (w - kw) / stride + 1,
                pad_top: 0,
                pad_left: 0,
            })
        }
        Padding::Same => {
            if h == 0 || w == 0 {
                return Err(TensorError::KernelTooLarge { kh, kw, h, w });
            }
            let out_h = h.div_ceil(stride);
            let out_w = w.div_ceil(stride);
            let pad_h = ((out_h - 1) * stride + kh).saturating_sub(h);
            let pad_w = ((out_w - 1) * stride + kw).saturating_sub(w);
            Ok(ConvGeometry {
                out_h,
                out_w,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
            })
        }
    }
}

pub fn pool_output_size(
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> Result<(usize, usize), TensorError> {
    if stride == 0 {
        return Err(TensorError::NonPositiveStride { op: "avg_pool2d" });
    }
    if window == 0 || window > h || window > w {
        return Err(TensorError::WindowTooLarge { window, h, w });
    }
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Output index range `[lo, hi)` for which `o*stride + off` lands in
/// `[0, len)`.
fn index_bounds(out_len: usize, len: usize, stride: usize, off: i64) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let max_in = len as i64 - 1 - off;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_len);
    if lo >= hi {
        (0, 0)
    } else {
        (lo, hi)
    }
}

fn saxpy<E: Element>(acc: &mut [E], k: E, x: &[E]) {
    for (a, v) in acc.iter_mut().zip(x) {
        *a += k * *v;
    }
}

fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = E::ZERO;
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Per-sample partial reductions folded in sample order.
fn fold_partials<E, F>(n: usize, len: usize, fill: F) -> Vec<E>
where
    E: Element,
    F: Fn(usize, &mut [E]) + Sync + Send,
{
    let partials = parallel::map_indexed(n, |ni| {
        let mut acc = vec![E::ZERO; len];
        fill(ni, &mut acc);
        acc
    });
    let mut total = vec![E::ZERO; len];
    for part in partials {
        for (t, v) in total.iter_mut().zip(&part) {
            *t += *v;
        }
    }
    total
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<E: Element>(
    x: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[E],
    c_out: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[E]>,
    stride: usize,
    geom: ConvGeometry,
) -> Vec<E> {
    let (out_h, out_w) = (geom.out_h, geom.out_w);
    let out_plane = out_h * out_w;
    let mut out = vec![E::ZERO; n * c_out * out_plane];
    parallel::for_each_chunk_mut(&mut out, c_out * out_plane, |ni, chunk| {
        for co in 0..c_out {
            let plane = &mut chunk[co * out_plane..][..out_plane];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            for ci in 0..c_in {
                let x_chan = &x[(ni * c_in + ci) * h * w..][..h * w];
                for khi in 0..kh {
                    let off_h = khi as i64 - geom.pad_top as i64;
                    let (oh_lo, oh_hi) = index_bounds(out_h, h, stride, off_h);
                    for kwi in 0..kw {
                        let wgt = weights[((co * c_in + ci) * kh + khi) * kw + kwi];
                        let off_w = kwi as i64 - geom.pad_left as i64;
                        let (lo, hi) = index_bounds(out_w, w, stride, off_w);
                        if lo >= hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = (oh * stride) as i64 + off_h;
                            let x_row = &x_chan[ih as usize * w..][..w];
                            let o_row = &mut plane[oh * out_w..][..out_w];
                            if stride == 1 {
                                let i0 = (lo as i64 + off_w) as usize;
                                saxpy(&mut o_row[lo..hi], wgt, &x_row[i0..i0 + hi - lo]);
                            } else {
                                for ow in lo..hi {
                                    let iw = ((ow * stride) as i64 + off_w) as usize;
                                    o_row[ow] += wgt * x_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_dx<E: Element>(
    dout: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    weights: &[E],
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: ConvGeometry,
) -> Vec<E> {
    let (out_h, out_w) = (geom.out_h, geom.out_w);
    let out_plane = out_h * out_w;
    let mut dx = vec![E::ZERO; n * c_in * h * w];
    parallel::for_each_chunk_mut(&mut dx, c_in * h * w, |ni, chunk| {
        for co in 0..c_out {
            let d_chan = &dout[(ni * c_out + co) * out_plane..][..out_plane];
            for ci in 0..c_in {
                let dx_chan = &mut chunk[ci * h * w..][..h * w];
                for khi in 0..kh {
                    let off_h = khi as i64 - geom.pad_top as i64;
                    let (oh_lo, oh_hi) = index_bounds(out_h, h, stride, off_h);
                    for kwi in 0..kw {
                        let wgt = weights[((co * c_in + ci) * kh + khi) * kw + kwi];
                        let off_w = kwi as i64 - geom.pad_left as i64;
                        let (lo, hi) = index_bounds(out_w, w, stride, off_w);
                        if lo >= hi {
                            continue;
                        }
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * stride) as i64 + off_h) as usize;
                            let d_row = &d_chan[oh * out_w..][..out_w];
                            let dx_row = &mut dx_chan[ih * w..][..w];
                            if stride == 1 {
                                let i0 = (lo as i64 + off_w) as usize;
                                saxpy(&mut dx_row[i0..i0 + hi - lo], wgt, &d_row[lo..hi]);
                            } else {
                                for ow in lo..hi {
                                    let iw = ((ow * stride) as i64 + off_w) as usize;
                                    dx_row[iw] += wgt * d_row[ow];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradients for the convolution weights and bias, folded over the batch in
/// sample order.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward_dw<E: Element>(
    x: &[E],
    dout: &[E],
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    geom: ConvGeometry,
) -> (Vec<E>, Vec<E>) {
    let (out_h, out_w) = (geom.out_h, geom.out_w);
    let out_plane = out_h * out_w;
    let w_len = c_out * c_in * kh * kw;
    let folded = fold_partials(n, w_len + c_out, |ni, acc| {
        for co in 0..c_out {
            let d_chan = &dout[(ni * c_out + co) * out_plane..][..out_plane];
            let mut bsum = E::ZERO;
            for v in d_chan {
                bsum += *v;
            }
            acc[w_len + co] += bsum;
            for ci in 0..c_in {
                let x_chan = &x[(ni * c_in + ci) * h * w..][..h * w];
                for khi in 0..kh {
                    let off_h = khi as i64 - geom.pad_top as i64;
                    let (oh_lo, oh_hi) = index_bounds(out_h, h, stride, off_h);
                    for kwi in 0..kw {
                        let off_w = kwi as i64 - geom.pad_left as i64;
                        let (lo, hi) = index_bounds(out_w, w, stride, off_w);
                        if lo >= hi {
                            continue;
                        }
                        let mut wsum = E::ZERO;
                        for oh in oh_lo..oh_hi {
                            let ih = ((oh * stride) as i64 + off_h) as usize;
                            let d_row = &d_chan[oh * out_w..][..out_w];
                            let x_row = &x_chan[ih * w..][..w];
                            if stride == 1 {
                                let i0 = (lo as i64 + off_w) as usize;
                                wsum += dot(&d_row[lo..hi], &x_row[i0..i0 + hi - lo]);
                            } else {
                                for ow in lo..hi {
                                    let iw = ((ow * stride) as i64 + off_w) as usize;
                                    wsum += d_row[ow] * x_row[iw];
                                }
                            }
                        }
                        acc[((co * c_in + ci) * kh + khi) * kw + kwi] += wsum;
                    }
                }
            }
        }
    });
    let db = folded[w_len..].to_vec();
    let mut dw = folded;
    dw.truncate(w_len);
    (dw, db)
}

/// Saved context from a training-mode batch-norm forward pass.
pub struct BnForward<E> {
    pub y: Vec<E>,
    pub xhat: Vec<E>,
    pub mean: Vec<E>,
    pub var: Vec<E>,
    pub inv_std: Vec<E>,
}

/// Normalize with batch statistics: biased variance over batch and spatial
/// positions, per channel.
pub fn batch_norm_train<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[E],
    beta: &[E],
    eps: E,
) -> BnForward<E> {
    let m = E::from_f64((n * spatial) as f64);
    let sums = fold_partials(n, c, |ni, acc: &mut [E]| {
        for ci in 0..c {
            let row = &x[(ni * c + ci) * spatial..][..spatial];
            let mut s = E::ZERO;
            for v in row {
                s += *v;
            }
            acc[ci] += s;
        }
    });
    let mean: Vec<E> = sums.iter().map(|s| *s / m).collect();
    let sq = fold_partials(n, c, |ni, acc: &mut [E]| {
        for ci in 0..c {
            let mu = mean[ci];
            let row = &x[(ni * c + ci) * spatial..][..spatial];
            let mut s = E::ZERO;
            for v in row {
                let d = *v - mu;
                s += d * d;
            }
            acc[ci] += s;
        }
    });
    let var: Vec<E> = sq.iter().map(|s| *s / m).collect();
    let inv_std: Vec<E> = var.iter().map(|v| E::ONE / (*v + eps).sqrt()).collect();
    let mut xhat = vec![E::ZERO; x.len()];
    parallel::for_each_chunk_mut(&mut xhat, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let mu = mean[ci];
            let is = inv_std[ci];
            let row = &x[(ni * c + ci) * spatial..][..spatial];
            for (o, v) in chunk[ci * spatial..][..spatial].iter_mut().zip(row) {
                *o = (*v - mu) * is;
            }
        }
    });
    let mut y = vec![E::ZERO; x.len()];
    parallel::for_each_chunk_mut(&mut y, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let g = gamma[ci];
            let b = beta[ci];
            let row = &xhat[(ni * c + ci) * spatial..][..spatial];
            for (o, v) in chunk[ci * spatial..][..spatial].iter_mut().zip(row) {
                *o = g * *v + b;
            }
        }
    });
    BnForward {
        y,
        xhat,
        mean,
        var,
        inv_std,
    }
}

/// Normalize with fixed running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm_eval<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    spatial: usize,
    gamma: &[E],
    beta: &[E],
    running_mean: &[E],
    running_var: &[E],
    eps: E,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    debug_assert_eq!(x.len(), n * c * spatial);
    let inv_std: Vec<E> = running_var
        .iter()
        .map(|v| E::ONE / (*v + eps).sqrt())
        .collect();
    let mut xhat = vec![E::ZERO; x.len()];
    parallel::for_each_chunk_mut(&mut xhat, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let mu = running_mean[ci];
            let is = inv_std[ci];
            let row = &x[(ni * c + ci) * spatial..][..spatial];
            for (o, v) in chunk[ci * spatial..][..spatial].iter_mut().zip(row) {
                *o = (*v - mu) * is;
            }
        }
    });
    let mut y = vec![E::ZERO; x.len()];
    parallel::for_each_chunk_mut(&mut y, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let g = gamma[ci];
            let b = beta[ci];
            let row = &xhat[(ni * c + ci) * spatial..][..spatial];
            for (o, v) in chunk[ci * spatial..][..spatial].iter_mut().zip(row) {
                *o = g * *v + b;
            }
        }
    });
    (y, xhat, inv_std)
}

/// Backward through training-mode batch norm; returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<E: Element>(
    dout: &[E],
    xhat: &[E],
    inv_std: &[E],
    gamma: &[E],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let m = E::from_f64((n * spatial) as f64);
    let sums = fold_partials(n, 2 * c, |ni, acc| {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let d = &dout[base..][..spatial];
            let xh = &xhat[base..][..spatial];
            let mut s = E::ZERO;
            let mut sx = E::ZERO;
            for (dv, xv) in d.iter().zip(xh) {
                s += *dv;
                sx += *dv * *xv;
            }
            acc[ci] += s;
            acc[c + ci] += sx;
        }
    });
    let dbeta = sums[..c].to_vec();
    let dgamma = sums[c..].to_vec();
    let mut dx = vec![E::ZERO; dout.len()];
    parallel::for_each_chunk_mut(&mut dx, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let k = gamma[ci] * inv_std[ci] / m;
            let db = dbeta[ci];
            let dg = dgamma[ci];
            let base = (ni * c + ci) * spatial;
            let d = &dout[base..][..spatial];
            let xh = &xhat[base..][..spatial];
            for ((o, dv), xv) in chunk[ci * spatial..][..spatial].iter_mut().zip(d).zip(xh) {
                *o = k * (m * *dv - db - *xv * dg);
            }
        }
    });
    (dx, dgamma, dbeta)
}

/// Backward through eval-mode batch norm; running statistics are constants.
pub fn batch_norm_eval_backward<E: Element>(
    dout: &[E],
    xhat: &[E],
    inv_std: &[E],
    gamma: &[E],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let sums = fold_partials(n, 2 * c, |ni, acc| {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let d = &dout[base..][..spatial];
            let xh = &xhat[base..][..spatial];
            let mut s = E::ZERO;
            let mut sx = E::ZERO;
            for (dv, xv) in d.iter().zip(xh) {
                s += *dv;
                sx += *dv * *xv;
            }
            acc[ci] += s;
            acc[c + ci] += sx;
        }
    });
    let dbeta = sums[..c].to_vec();
    let dgamma = sums[c..].to_vec();
    let mut dx = vec![E::ZERO; dout.len()];
    parallel::for_each_chunk_mut(&mut dx, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let k = gamma[ci] * inv_std[ci];
            let d = &dout[(ni * c + ci) * spatial..][..spatial];
            for (o, dv) in chunk[ci * spatial..][..spatial].iter_mut().zip(d) {
                *o = k * *dv;
            }
        }
    });
    (dx, dgamma, dbeta)
}

pub fn avg_pool2d_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<E> {
    let inv = E::ONE / E::from_f64((window * window) as f64);
    let mut out = vec![E::ZERO; n * c * out_h * out_w];
    parallel::for_each_chunk_mut(&mut out, c * out_h * out_w, |ni, chunk| {
        for ci in 0..c {
            let x_chan = &x[(ni * c + ci) * h * w..][..h * w];
            let plane = &mut chunk[ci * out_h * out_w..][..out_h * out_w];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut s = E::ZERO;
                    for dh in 0..window {
                        let row = &x_chan[(oh * stride + dh) * w + ow * stride..][..window];
                        for v in row {
                            s += *v;
                        }
                    }
                    plane[oh * out_w + ow] = s * inv;
                }
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool2d_backward<E: Element>(
    dout: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<E> {
    let inv = E::ONE / E::from_f64((window * window) as f64);
    let mut dx = vec![E::ZERO; n * c * h * w];
    parallel::for_each_chunk_mut(&mut dx, c * h * w, |ni, chunk| {
        for ci in 0..c {
            let d_plane = &dout[(ni * c + ci) * out_h * out_w..][..out_h * out_w];
            let dx_chan = &mut chunk[ci * h * w..][..h * w];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let g = d_plane[oh * out_w + ow] * inv;
                    for dh in 0..window {
                        let row = &mut dx_chan[(oh * stride + dh) * w + ow * stride..][..window];
                        for v in row {
                            *v += g;
                        }
                    }
                }
            }
        }
    });
    dx
}

pub fn global_avg_pool_forward<E: Element>(x: &[E], n: usize, c: usize, spatial: usize) -> Vec<E> {
    let inv = E::ONE / E::from_f64(spatial as f64);
    let mut out = vec![E::ZERO; n * c];
    parallel::for_each_chunk_mut(&mut out, c, |ni, chunk| {
        for ci in 0..c {
            let row = &x[(ni * c + ci) * spatial..][..spatial];
            let mut s = E::ZERO;
            for v in row {
                s += *v;
            }
            chunk[ci] = s * inv;
        }
    });
    out
}

pub fn global_avg_pool_backward<E: Element>(
    dout: &[E],
    n: usize,
    c: usize,
    spatial: usize,
) -> Vec<E> {
    let inv = E::ONE / E::from_f64(spatial as f64);
    let mut dx = vec![E::ZERO; n * c * spatial];
    parallel::for_each_chunk_mut(&mut dx, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let g = dout[ni * c + ci] * inv;
            for v in &mut chunk[ci * spatial..][..spatial] {
                *v = g;
            }
        }
    });
    dx
}

pub fn dense_forward<E: Element>(
    x: &[E],
    n: usize,
    in_dim: usize,
    weights: &[E],
    out_dim: usize,
    bias: Option<&[E]>,
) -> Vec<E> {
    let mut out = vec![E::ZERO; n * out_dim];
    parallel::for_each_chunk_mut(&mut out, out_dim, |ni, row| {
        if let Some(b) = bias {
            row.copy_from_slice(b);
        }
        let x_row = &x[ni * in_dim..][..in_dim];
        for (i, xv) in x_row.iter().enumerate() {
            saxpy(row, *xv, &weights[i * out_dim..][..out_dim]);
        }
    });
    out
}

pub fn dense_backward_dx<E: Element>(
    dout: &[E],
    n: usize,
    in_dim: usize,
    weights: &[E],
    out_dim: usize,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; n * in_dim];
    parallel::for_each_chunk_mut(&mut dx, in_dim, |ni, row| {
        let d_row = &dout[ni * out_dim..][..out_dim];
        for (i, o) in row.iter_mut().enumerate() {
            *o = dot(d_row, &weights[i * out_dim..][..out_dim]);
        }
    });
    dx
}

/// Gradients for dense weights and bias, folded over the batch in sample
/// order.
pub fn dense_backward_dw<E: Element>(
    x: &[E],
    dout: &[E],
    n: usize,
    in_dim: usize,
    out_dim: usize,
) -> (Vec<E>, Vec<E>) {
    let w_len = in_dim * out_dim;
    let folded = fold_partials(n, w_len + out_dim, |ni, acc| {
        let x_row = &x[ni * in_dim..][..in_dim];
        let d_row = &dout[ni * out_dim..][..out_dim];
        for (i, xv) in x_row.iter().enumerate() {
            saxpy(&mut acc[i * out_dim..][..out_dim], *xv, d_row);
        }
        saxpy(&mut acc[w_len..], E::ONE, d_row);
    });
    let db = folded[w_len..].to_vec();
    let mut dw = folded;
    dw.truncate(w_len);
    (dw, db)
}

/// Broadcast-multiply each channel plane by a per-sample, per-channel scale.
pub fn scale_channels_forward<E: Element>(
    x: &[E],
    scale: &[E],
    n: usize,
    c: usize,
    spatial: usize,
) -> Vec<E> {
    debug_assert_eq!(x.len(), n * c * spatial);
    let mut out = vec![E::ZERO; x.len()];
    parallel::for_each_chunk_mut(&mut out, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let s = scale[ni * c + ci];
            let row = &x[(ni * c + ci) * spatial..][..spatial];
            for (o, v) in chunk[ci * spatial..][..spatial].iter_mut().zip(row) {
                *o = s * *v;
            }
        }
    });
    out
}

/// Backward of [`scale_channels_forward`]; returns `(dx, dscale)`.
pub fn scale_channels_backward<E: Element>(
    dout: &[E],
    x: &[E],
    scale: &[E],
    n: usize,
    c: usize,
    spatial: usize,
) -> (Vec<E>, Vec<E>) {
    let mut dx = vec![E::ZERO; x.len()];
    parallel::for_each_chunk_mut(&mut dx, c * spatial, |ni, chunk| {
        for ci in 0..c {
            let s = scale[ni * c + ci];
            let d = &dout[(ni * c + ci) * spatial..][..spatial];
            for (o, dv) in chunk[ci * spatial..][..spatial].iter_mut().zip(d) {
                *o = s * *dv;
            }
        }
    });
    let mut ds = vec![E::ZERO; n * c];
    parallel::for_each_chunk_mut(&mut ds, c, |ni, chunk| {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            chunk[ci] = dot(&dout[base..][..spatial], &x[base..][..spatial]);
        }
    });
    (dx, ds)
}
