use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Rows produced per sentence: max, mean, first and last state.
pub const POOLED_ROWS: usize = 4;

/// `[h_max, h_avg, h_1, h_L]` for one sentence `h: [L×D]`, as `[4×D]`.
pub fn pooling_baseline<'g, F: Real>(h: Var<'g, F>) -> Result<Var<'g, F>> {
    let s = h.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::contract(format!("expected non-empty [L×D] states, got {s:?}")));
    }
    pooling_batch(h.reshape(vec![1, s[0], s[1]])?, &[s[0]])?.reshape(vec![POOLED_ROWS, s[1]])
}

/// Pools a padded batch `h: [B×L×D]` into `[B×4×D]` using only the first
/// `lens[b]` positions of each row.
pub fn pooling_batch<'g, F: Real>(h: Var<'g, F>, lens: &[usize]) -> Result<Var<'g, F>> {
    let s = h.shape();
    if s.len() != 3 || s[0] != lens.len() || lens.iter().any(|&n| n == 0 || n > s[1]) {
        return Err(Error::contract(format!("lengths {lens:?} do not fit states {s:?}")));
    }
    let (batch, l) = (s[0], s[1]);
    let g = h.graph();
    let first = h.narrow(1, 0, 1)?;
    let pooled = if lens.iter().all(|&n| n == l) {
        [h.max(1, true)?, h.mean(1, true)?, first, h.narrow(1, l - 1, 1)?]
    } else {
        let keep = |k: usize| k % l < lens[k / l];
        let mask = g.constant(Tensor::from_fn(vec![batch, l, 1], |k| if keep(k) { F::one() } else { F::zero() }));
        let block = g.constant(Tensor::from_fn(vec![batch, l, 1], |k| if keep(k) { F::zero() } else { F::of(-1e9) }));
        let inv_len = g.constant(Tensor::from_fn(vec![batch, 1, 1], |b| F::one() / F::of(lens[b] as f64)));
        let last = g.constant(Tensor::from_fn(vec![batch, l, 1], |k| {
            if k % l + 1 == lens[k / l] { F::one() } else { F::zero() }
        }));
        [
            h.add(block)?.max(1, true)?,
            h.mul(mask)?.sum(1, true)?.mul(inv_len)?,
            first,
            h.mul(last)?.sum(1, true)?,
        ]
    };
    g.concat(&pooled, 1)
}
