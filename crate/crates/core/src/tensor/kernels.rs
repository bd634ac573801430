//! Loop kernels shared by the forward and adjoint passes.

use super::Real;
use crate::error::{Error, Result};

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// `out += a[m×k] · b[k×n]`.
pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    F::gemm((m, k, n), (a, ki, 1), (b, ni, 1), (out, ni, 1));
}

/// `out[m×k] += g[m×n] · bᵀ` where `b` is `k×n`.
pub(crate) fn matmul_a_bt<F: Real>(g: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    F::gemm((m, n, k), (g, ni, 1), (b, 1, ni), (out, ki, 1));
}

/// `out[k×n] += aᵀ · g` where `a` is `m×k` and `g` is `m×n`.
pub(crate) fn matmul_at_b<F: Real>(a: &[F], g: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let (ki, ni) = (k as isize, n as isize);
    F::gemm((k, m, n), (a, 1, ki), (g, ni, 1), (out, ni, 1));
}

#[cfg(test)]
pub(crate) fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Result shape of numpy-style broadcasting, right-aligned.
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

/// Strides of `shape` expressed in the index space of `out`, with zero
/// stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// How two operands map onto a broadcast result.
pub(crate) enum Broadcast {
    Same,
    /// `b` repeats with period `n` over the flat output (a trailing-suffix broadcast).
    SuffixB(usize),
    General {
        out: Vec<usize>,
        sa: Vec<usize>,
        sb: Vec<usize>,
    },
}

impl Broadcast {
    pub(crate) fn plan(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Self)> {
        let out = broadcast_shape(a, b).ok_or_else(|| Error::Shape {
            op: "broadcast",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })?;
        if a == b {
            return Ok((out, Broadcast::Same));
        }
        let nb: usize = b.iter().product();
        let trailing: &[usize] = {
            let mut t = b;
            while t.first() == Some(&1) && t.len() > 1 {
                t = &t[1..];
            }
            t
        };
        if a == out.as_slice() && out.ends_with(trailing) {
            return Ok((out, Broadcast::SuffixB(nb)));
        }
        let sa = broadcast_strides(a, &out);
        let sb = broadcast_strides(b, &out);
        Ok((out.clone(), Broadcast::General { out, sa, sb }))
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in order.
    pub(crate) fn for_each(&self, numel: usize, mut f: impl FnMut(usize, usize, usize)) {
        match self {
            Broadcast::Same => (0..numel).for_each(|i| f(i, i, i)),
            Broadcast::SuffixB(n) => (0..numel).for_each(|i| f(i, i, i % n)),
            Broadcast::General { out, sa, sb } => {
                let rank = out.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..numel {
                    f(o, ia, ib);
                    for d in (0..rank).rev() {
                        idx[d] += 1;
                        ia += sa[d];
                        ib += sb[d];
                        if idx[d] < out[d] {
                            break;
                        }
                        ia -= sa[d] * out[d];
                        ib -= sb[d] * out[d];
                        idx[d] = 0;
                    }
                }
            }
        }
    }
}
