//! Forward and backward kernels shared by the tape primitives.

use rayon::prelude::*;

use super::{numel, Float};
use crate::error::{Error, Result};

/// Rows per independent GEMM block. Fixed so results never depend on the
/// number of worker threads.
const ROW_BLOCK: usize = 64;

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

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

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = contiguous_strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

fn is_suffix(inner: &[usize], outer: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

/// Visits every element of `out_shape` in row-major order, passing the
/// flat output index and the offsets into two strided operands.
fn for_each_offset2(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    if out_shape.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out_shape.len();
    let inner = out_shape[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut index = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut flat = 0;
    while flat < total {
        for j in 0..inner {
            f(flat + j, oa + j * ia, ob + j * ib);
        }
        flat += inner;
        // advance the odometer over the outer axes
        let mut axis = rank - 1;
        while axis > 0 {
            axis -= 1;
            index[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            oa -= sa[axis] * out_shape[axis];
            ob -= sb[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
}

pub(crate) fn binary<T: Float>(
    op: &'static str,
    a: &[T],
    ashape: &[usize],
    b: &[T],
    bshape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Result<(Vec<T>, Vec<usize>)> {
    let out_shape = broadcast_shape(ashape, bshape).ok_or_else(|| Error::shape(op, ashape, bshape))?;
    if ashape == bshape {
        return Ok((a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(), out_shape));
    }
    if ashape == out_shape.as_slice() && is_suffix(bshape, ashape) && !b.is_empty() {
        let nb = b.len();
        let out = a
            .chunks(nb)
            .flat_map(|chunk| chunk.iter().zip(b).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok((out, out_shape));
    }
    if bshape == out_shape.as_slice() && is_suffix(ashape, bshape) && !a.is_empty() {
        let na = a.len();
        let out = b
            .chunks(na)
            .flat_map(|chunk| a.iter().zip(chunk).map(|(&x, &y)| f(x, y)))
            .collect();
        return Ok((out, out_shape));
    }
    let sa = broadcast_strides(ashape, &out_shape);
    let sb = broadcast_strides(bshape, &out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    for_each_offset2(&out_shape, &sa, &sb, |i, oa, ob| out[i] = f(a[oa], b[ob]));
    Ok((out, out_shape))
}

/// Sums a gradient of shape `from` down to a broadcast operand's `to` shape.
pub(crate) fn reduce_to_shape<T: Float>(grad: &[T], from: &[usize], to: &[usize]) -> Vec<T> {
    if from == to {
        return grad.to_vec();
    }
    let n = numel(to);
    let mut out = vec![T::zero(); n];
    if is_suffix(to, from) && n > 0 {
        for chunk in grad.chunks(n) {
            for (o, &g) in out.iter_mut().zip(chunk) {
                *o += g;
            }
        }
        return out;
    }
    let st = broadcast_strides(to, from);
    let zeros = vec![0; from.len()];
    for_each_offset2(from, &st, &zeros, |i, ot, _| out[ot] += grad[i]);
    out
}

/// Copies `src` (contiguous with `shape`) into the axis order `perm`.
pub(crate) fn permute<T: Float>(src: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let zeros = vec![0; perm.len()];
    let mut out = vec![T::zero(); src.len()];
    for_each_offset2(&out_shape, &src_strides, &zeros, |i, o, _| out[i] = src[o]);
    (out, out_shape)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Output shape and batch layout of `a @ b`.
pub(crate) struct MatmulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `b` is a single matrix shared by every batch entry of `a`.
    pub shared_rhs: bool,
    pub out_shape: Vec<usize>,
}

pub(crate) fn matmul_dims(ashape: &[usize], bshape: &[usize]) -> Result<MatmulDims> {
    let err = || Error::shape("matmul", ashape, bshape);
    if ashape.len() < 2 || bshape.len() < 2 {
        return Err(err());
    }
    let (m, k) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
    let (kb, n) = (bshape[bshape.len() - 2], bshape[bshape.len() - 1]);
    if k != kb {
        return Err(err());
    }
    let batch_dims = &ashape[..ashape.len() - 2];
    let shared_rhs = bshape.len() == 2;
    if !shared_rhs && bshape[..bshape.len() - 2] != *batch_dims {
        return Err(err());
    }
    let mut out_shape = batch_dims.to_vec();
    out_shape.extend([m, n]);
    Ok(MatmulDims {
        batch: numel(batch_dims),
        m,
        k,
        n,
        shared_rhs,
        out_shape,
    })
}

/// Row-blocked `c = a · b` for one contiguous `m×k` by `k×n` product, with
/// optional transposition of either operand's storage.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    c: &mut [T],
) {
    if m <= ROW_BLOCK || csa != 1 || n == 0 {
        T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, T::zero(), c, n as isize, 1);
        return;
    }
    c.par_chunks_mut(ROW_BLOCK * n)
        .enumerate()
        .for_each(|(blk, cblk)| {
            let rows = cblk.len() / n.max(1);
            let start = blk * ROW_BLOCK * rsa as usize;
            T::gemm(rows, k, n, &a[start..], rsa, csa, b, rsb, csb, T::zero(), cblk, n as isize, 1);
        });
}

pub(crate) fn matmul<T: Float>(a: &[T], b: &[T], d: &MatmulDims) -> Vec<T> {
    let (m, k, n) = (d.m, d.k, d.n);
    let mut c = vec![T::zero(); d.batch * m * n];
    if d.shared_rhs {
        gemm_rows(d.batch * m, k, n, a, (k as isize, 1), b, (n as isize, 1), &mut c);
    } else {
        c.par_chunks_mut((m * n).max(1))
            .zip(a.par_chunks((m * k).max(1)))
            .zip(b.par_chunks((k * n).max(1)))
            .for_each(|((cb, ab), bb)| {
                T::gemm(m, k, n, ab, k as isize, 1, bb, n as isize, 1, T::zero(), cb, n as isize, 1);
            });
    }
    c
}

/// Gradients of `a @ b` given the output gradient.
pub(crate) fn matmul_backward<T: Float>(
    a: &[T],
    b: &[T],
    grad: &[T],
    d: &MatmulDims,
    need_a: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (m, k, n) = (d.m, d.k, d.n);
    let ga = need_a.then(|| {
        // dA = dC · Bᵀ
        let mut ga = vec![T::zero(); d.batch * m * k];
        if d.shared_rhs {
            gemm_rows(d.batch * m, n, k, grad, (n as isize, 1), b, (1, n as isize), &mut ga);
        } else {
            ga.par_chunks_mut((m * k).max(1))
                .zip(grad.par_chunks((m * n).max(1)))
                .zip(b.par_chunks((k * n).max(1)))
                .for_each(|((gab, gb), bb)| {
                    T::gemm(m, n, k, gb, n as isize, 1, bb, 1, n as isize, T::zero(), gab, k as isize, 1);
                });
        }
        ga
    });
    let gb = need_b.then(|| {
        // dB = Aᵀ · dC, summed over the batch when B is shared
        if d.shared_rhs {
            let rows = d.batch * m;
            let mut gb = vec![T::zero(); k * n];
            T::gemm(k, rows, n, a, 1, k as isize, grad, n as isize, 1, T::zero(), &mut gb, n as isize, 1);
            gb
        } else {
            let mut gb = vec![T::zero(); d.batch * k * n];
            gb.par_chunks_mut((k * n).max(1))
                .zip(a.par_chunks((m * k).max(1)))
                .zip(grad.par_chunks((m * n).max(1)))
                .for_each(|((gbb, ab), gg)| {
                    T::gemm(k, m, n, ab, 1, k as isize, gg, n as isize, 1, T::zero(), gbb, n as isize, 1);
                });
            gb
        }
    });
    (ga, gb)
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

pub(crate) fn gelu<T: Float>(x: T) -> T {
    let x = x.as_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    T::from_f64(0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
}

pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let x = x.as_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
}
