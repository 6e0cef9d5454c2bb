//! Broadcasting for elementwise ops and axis reductions.
//!
//! Shapes broadcast numpy-style: right-aligned, missing leading dims act as 1,
//! size-1 dims expand. Gradients reduce back by summing over expanded axes, so
//! a parameter's gradient always has the parameter's own shape.

use super::profile::span;
use super::{BackwardCtx, BinaryKind, Result, Tensor, TensorError};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::BroadcastIncompatible(a.to_vec(), b.to_vec()));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Row-major strides of `shape` viewed through `out_shape`; 0 marks broadcast dims.
fn strides_into(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let offset = ndim - shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        if i >= offset && shape[i - offset] != 1 {
            out[i] = natural[i - offset];
        }
    }
    out
}

/// Walk `out_shape` in row-major order calling f(out_index, a_index, b_index).
fn zip_walk(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let ndim = out_shape.len();
    if ndim == 0 {
        f(0, 0, 0);
        return;
    }
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let inner = out_shape[ndim - 1];
    let sa_in = sa[ndim - 1];
    let sb_in = sb[ndim - 1];
    let outer = total / inner;
    let mut idx = vec![0usize; ndim - 1];
    let mut ai = 0usize;
    let mut bi = 0usize;
    let mut oi = 0usize;
    for _ in 0..outer {
        let (mut a, mut b) = (ai, bi);
        for _ in 0..inner {
            f(oi, a, b);
            oi += 1;
            a += sa_in;
            b += sb_in;
        }
        // odometer over the outer dims
        for d in (0..ndim - 1).rev() {
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary_op(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    kind: BinaryKind,
) -> Result<Tensor> {
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let _p = span("elementwise.forward");
    let total: usize = out_shape.iter().product();
    let ad = a.data();
    let bd = b.data();
    let mut data = vec![0.0f64; total];
    if a.shape() == b.shape() {
        for ((o, &x), &y) in data.iter_mut().zip(ad.iter()).zip(bd.iter()) {
            *o = f(x, y);
        }
    } else {
        let sa = strides_into(a.shape(), &out_shape);
        let sb = strides_into(b.shape(), &out_shape);
        zip_walk(&out_shape, &sa, &sb, |oi, ai, bi| data[oi] = f(ad[ai], bd[bi]));
    }
    drop(ad);
    drop(bd);

    let a_saved = a.clone();
    let b_saved = b.clone();
    let shape_saved = out_shape.clone();
    Ok(Tensor::from_op(out_shape, data, vec![a.clone(), b.clone()], move |ctx| {
        accumulate_binary(ctx, &a_saved, &b_saved, &shape_saved, kind);
    }))
}

fn accumulate_binary(ctx: &BackwardCtx<'_>, a: &Tensor, b: &Tensor, out_shape: &[usize], kind: BinaryKind) {
    let _p = span("elementwise.backward");
    let g = ctx.grad;
    let same = a.shape() == b.shape();
    let sa = strides_into(a.shape(), out_shape);
    let sb = strides_into(b.shape(), out_shape);
    if a.requires_grad() {
        let mut da = a.grad_buf_mut();
        match kind {
            BinaryKind::Add | BinaryKind::Sub => {
                if same {
                    for (d, &up) in da.iter_mut().zip(g) {
                        *d += up;
                    }
                } else {
                    zip_walk(out_shape, &sa, &sb, |oi, ai, _| da[ai] += g[oi]);
                }
            }
            BinaryKind::Mul => {
                let bd = b.data();
                if same {
                    for ((d, &up), &bv) in da.iter_mut().zip(g).zip(bd.iter()) {
                        *d += up * bv;
                    }
                } else {
                    zip_walk(out_shape, &sa, &sb, |oi, ai, bi| da[ai] += g[oi] * bd[bi]);
                }
            }
        }
    }
    if b.requires_grad() {
        let mut db = b.grad_buf_mut();
        match kind {
            BinaryKind::Add => {
                if same {
                    for (d, &up) in db.iter_mut().zip(g) {
                        *d += up;
                    }
                } else {
                    zip_walk(out_shape, &sa, &sb, |oi, _, bi| db[bi] += g[oi]);
                }
            }
            BinaryKind::Sub => {
                if same {
                    for (d, &up) in db.iter_mut().zip(g) {
                        *d -= up;
                    }
                } else {
                    zip_walk(out_shape, &sa, &sb, |oi, _, bi| db[bi] -= g[oi]);
                }
            }
            BinaryKind::Mul => {
                let ad = a.data();
                if same {
                    for ((d, &up), &av) in db.iter_mut().zip(g).zip(ad.iter()) {
                        *d += up * av;
                    }
                } else {
                    zip_walk(out_shape, &sa, &sb, |oi, ai, bi| db[bi] += g[oi] * ad[ai]);
                }
            }
        }
    }
}

/// Sum or mean over `axes`; reduced axes are removed from the shape.
pub(crate) fn reduce_axes(x: &Tensor, axes: &[usize], mean: bool) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    for &ax in axes {
        if ax >= shape.len() {
            return Err(TensorError::BadAxis { axis: ax, shape });
        }
    }
    let keep: Vec<usize> =
        (0..shape.len()).filter(|d| !axes.contains(d)).map(|d| shape[d]).collect();
    let out_shape = if keep.is_empty() { vec![1] } else { keep };
    let reduced: usize = axes.iter().map(|&d| shape[d]).product();
    let scale = if mean { 1.0 / reduced as f64 } else { 1.0 };

    // strides of the input mapped onto (kept dims ++ reduced dims) iteration
    let mut kept_dims: Vec<usize> = (0..shape.len()).filter(|d| !axes.contains(d)).collect();
    let mut red_dims: Vec<usize> = axes.to_vec();
    kept_dims.sort_unstable();
    red_dims.sort_unstable();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }

    let out_len: usize = out_shape.iter().product();
    let xd = x.data();
    let mut data = vec![0.0f64; out_len];
    walk_two_level(&shape, &kept_dims, &red_dims, &natural, |oi, xi| data[oi] += xd[xi]);
    if mean {
        for v in data.iter_mut() {
            *v *= scale;
        }
    }
    drop(xd);

    let shape_b = shape.clone();
    let kept_b = kept_dims.clone();
    let red_b = red_dims.clone();
    let natural_b = natural.clone();
    Ok(Tensor::from_op(out_shape, data, vec![x.clone()], move |ctx| {
        if ctx.parents[0].requires_grad() {
            let mut g = ctx.parents[0].grad_buf_mut();
            walk_two_level(&shape_b, &kept_b, &red_b, &natural_b, |oi, xi| {
                g[xi] += ctx.grad[oi] * scale;
            });
        }
    }))
}

/// Iterate kept dims (outer, row-major) then reduced dims (inner), producing
/// (output index, input index) pairs.
fn walk_two_level(
    shape: &[usize],
    kept: &[usize],
    reduced: &[usize],
    natural: &[usize],
    mut f: impl FnMut(usize, usize),
) {
    let kept_total: usize = kept.iter().map(|&d| shape[d]).product();
    let red_total: usize = reduced.iter().map(|&d| shape[d]).product();
    let mut kept_idx = vec![0usize; kept.len()];
    let mut base = 0usize;
    for oi in 0..kept_total.max(1) {
        let mut red_idx = vec![0usize; reduced.len()];
        let mut xi = base;
        for _ in 0..red_total.max(1) {
            f(oi, xi);
            for (j, &d) in reduced.iter().enumerate().rev() {
                red_idx[j] += 1;
                xi += natural[d];
                if red_idx[j] < shape[d] {
                    break;
                }
                xi -= natural[d] * shape[d];
                red_idx[j] = 0;
            }
        }
        for (j, &d) in kept.iter().enumerate().rev() {
            kept_idx[j] += 1;
            base += natural[d];
            if kept_idx[j] < shape[d] {
                break;
            }
            base -= natural[d] * shape[d];
            kept_idx[j] = 0;
        }
    }
}
