//! Single steps of the routing procedure.
//!
//! Every op accepts arbitrary leading batch axes in front of the documented
//! shapes, so the same code serves one sentence and a padded batch.

use super::{RoutingParams, ScorerParams, Scoring};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Bound};
use crate::tensor::{Real, Tensor, Var};

/// Shrinks `v` along its last axis to length `‖v‖²/(1+‖v‖²)`.
pub fn squash<'g, F: Real>(v: Var<'g, F>) -> Result<Var<'g, F>> {
    v.squash()
}

/// Vote of child `h_i` (1-based position `position`) for parent `j` at
/// iteration `t`: `relu((h_i + PE_position) · W_j^t)`.
pub fn transform_child<'g, F: Real>(
    p: &Bound<'g, F>,
    params: &RoutingParams,
    h_i: Var<'g, F>,
    position: usize,
    j: usize,
    t: usize,
) -> Result<Var<'g, F>> {
    let cfg = &params.config;
    let d = cfg.dim;
    if j >= cfg.capsules {
        return Err(Error::Index { what: "parent", index: j, bound: cfg.capsules });
    }
    if t >= cfg.iterations {
        return Err(Error::Index { what: "iteration", index: t, bound: cfg.iterations });
    }
    if h_i.shape() != [d] {
        return Err(Error::Shape { op: "transform_child", lhs: h_i.shape(), rhs: vec![d] });
    }
    let mut h = h_i;
    if cfg.positional {
        let pe = positional_encoding::<F>(position + 1, d)?;
        h = h.add(h.graph().constant(Tensor::new(vec![d], pe.row(position).to_vec())?))?;
    }
    let w = p.get(params.transform(t)).narrow(1, j * d, d)?;
    h.reshape(vec![1, d])?.matmul(w)?.relu().reshape(vec![d])
}

/// Coupling coefficients: softmax of the logits over the parent axis.
pub fn update_coupling<'g, F: Real>(b: Var<'g, F>) -> Result<Var<'g, F>> {
    let rank = b.shape().len();
    if rank < 2 {
        return Err(Error::Axis { axis: 1, rank });
    }
    b.softmax(rank - 1)
}

/// Parents `c_j = squash(Σ_i α_ij · votes[i,j])` from `alpha: [L×M]` and
/// `votes: [L×M×d]`.
pub fn aggregate_parents<'g, F: Real>(alpha: Var<'g, F>, votes: Var<'g, F>) -> Result<Var<'g, F>> {
    let (a, v) = (alpha.shape(), votes.shape());
    if a.len() < 2 || v.len() != a.len() + 1 || v[..a.len()] != a[..] {
        return Err(Error::Shape { op: "aggregate_parents", lhs: a, rhs: v });
    }
    let mut expanded = a.clone();
    expanded.push(1);
    alpha
        .reshape(expanded)?
        .mul(votes)?
        .sum(a.len() - 2, false)?
        .squash()
}

/// Adds the agreement between parents `[M×d]` and children to the logits
/// `b: [L×M]`.
///
/// Dot scoring compares each parent with its votes `[L×M×d]`; separable
/// scoring compares `g(parent)` with `g(child)` for the child states
/// `[L×d]`, which must then be supplied along with the scorer.
pub fn update_logits<'g, F: Real>(
    p: &Bound<'g, F>,
    b: Var<'g, F>,
    parents: Var<'g, F>,
    votes: Var<'g, F>,
    children: Option<Var<'g, F>>,
    scoring: Scoring,
    scorer: Option<&ScorerParams>,
) -> Result<Var<'g, F>> {
    let delta = match scoring {
        Scoring::Dot => dot_agreement(parents, votes)?,
        Scoring::Separable => {
            let (children, scorer) = children.zip(scorer).ok_or_else(|| {
                Error::contract("separable scoring needs child states and scorer parameters")
            })?;
            separable_agreement(scorer.apply(p, parents)?, scorer.apply(p, children)?)?
        }
    };
    b.add(delta)
}

/// `Σ_d parents[j,d] · votes[i,j,d]` as `[L×M]`.
pub(crate) fn dot_agreement<'g, F: Real>(parents: Var<'g, F>, votes: Var<'g, F>) -> Result<Var<'g, F>> {
    let mut s = parents.shape();
    let rank = s.len();
    if rank < 2 {
        return Err(Error::Axis { axis: 1, rank });
    }
    s.insert(rank - 2, 1);
    parents.reshape(s)?.mul(votes)?.sum(rank, false)
}

/// `g_parents: [M×d]`, `g_children: [L×d]` to `[L×M]` inner products.
pub(crate) fn separable_agreement<'g, F: Real>(
    g_parents: Var<'g, F>,
    g_children: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let mut sp = g_parents.shape();
    let mut sc = g_children.shape();
    let rank = sp.len();
    if rank < 2 || sc.len() != rank {
        return Err(Error::Shape { op: "separable scoring", lhs: sp, rhs: sc });
    }
    sp.insert(rank - 2, 1);
    sc.insert(rank - 1, 1);
    g_children.reshape(sc)?.mul(g_parents.reshape(sp)?)?.sum(rank, false)
}
