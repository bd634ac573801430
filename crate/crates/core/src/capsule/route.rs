use std::io::Write;

use super::ops::{aggregate_parents, dot_agreement, separable_agreement};
use super::{CouplingAxis, RoutingParams, Scoring};
use crate::error::{Error, Result};
use crate::nn::{positional_encoding, Bound};
use crate::tensor::{Real, Tensor, Var};

/// Coupling coefficients and logits seen at each routing iteration.
///
/// `alpha[t]` is computed from `logits[t]`; both are `[L×M]` for a single
/// sentence or `[B×L×M]` for a batch.
#[derive(Debug, Clone)]
pub struct RoutingTrace<F: Real = f32> {
    pub alpha: Vec<Tensor<F>>,
    pub logits: Vec<Tensor<F>>,
    /// Mean entropy (nats) of the coupling distributions over real children.
    pub entropy: Vec<f64>,
}

impl<F: Real> RoutingTrace<F> {
    pub fn iterations(&self) -> usize {
        self.alpha.len()
    }

    /// The `[len×M]` trace of one sentence from a batched trace.
    pub fn sentence(&self, b: usize, len: usize, axis: CouplingAxis) -> Result<Self> {
        let cut = |t: &Tensor<F>| -> Result<Tensor<F>> {
            let s = t.shape();
            if s.len() != 3 || b >= s[0] || len > s[1] {
                return Err(Error::contract(format!("cannot take sentence {b} of length {len} from {s:?}")));
            }
            let m = s[2];
            let start = b * s[1] * m;
            Tensor::new(vec![len, m], t.data()[start..start + len * m].to_vec())
        };
        let alpha = self.alpha.iter().map(cut).collect::<Result<Vec<_>>>()?;
        let entropy = alpha.iter().map(|a| mean_entropy(a, &[len], axis)).collect();
        Ok(Self {
            alpha,
            logits: self.logits.iter().map(cut).collect::<Result<_>>()?,
            entropy,
        })
    }

    /// Writes `iteration,child,parent,alpha,b` rows, 1-based iterations and
    /// 0-based indices.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,child,parent,alpha,b")?;
        for (t, (a, b)) in self.alpha.iter().zip(&self.logits).enumerate() {
            let m = *a.shape().last().unwrap_or(&1);
            for (k, (av, bv)) in a.data().iter().zip(b.data()).enumerate() {
                writeln!(w, "{},{},{},{},{}", t + 1, k / m, k % m, av, bv)?;
            }
        }
        Ok(())
    }

    pub fn write_entropy_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "iteration,mean_entropy")?;
        for (t, e) in self.entropy.iter().enumerate() {
            writeln!(w, "{},{}", t + 1, e)?;
        }
        Ok(())
    }
}

/// Mean entropy of the coupling distributions in `alpha: [B×L×M]` (or
/// `[L×M]`), ignoring padded children.
fn mean_entropy<F: Real>(alpha: &Tensor<F>, lens: &[usize], axis: CouplingAxis) -> f64 {
    let s = alpha.shape();
    let (l, m) = (s[s.len() - 2], s[s.len() - 1]);
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    let at = |b: usize, i: usize, j: usize| alpha.data()[(b * l + i) * m + j].f64();
    let (mut total, mut count) = (0.0, 0usize);
    for (b, &len) in lens.iter().enumerate() {
        match axis {
            CouplingAxis::Parents => {
                for i in 0..len {
                    total += (0..m).map(|j| h(at(b, i, j))).sum::<f64>();
                    count += 1;
                }
            }
            CouplingAxis::Children => {
                for j in 0..m {
                    total += (0..len).map(|i| h(at(b, i, j))).sum::<f64>();
                    count += 1;
                }
            }
        }
    }
    total / count.max(1) as f64
}

/// Sinusoid rows for positions `1..=n` as an `[n×d]` tensor.
fn positions_from_one<F: Real>(n: usize, d: usize) -> Result<Tensor<F>> {
    let pe = positional_encoding::<F>(n + 1, d)?;
    Tensor::new(vec![n, d], pe.data()[d..].to_vec())
}

/// Routes one sentence `h: [L×d_c]` into parents `[M×d_c]`.
pub fn dynamic_route<'g, F: Real>(
    p: &Bound<'g, F>,
    params: &RoutingParams,
    h: Var<'g, F>,
) -> Result<(Var<'g, F>, RoutingTrace<F>)> {
    let s = h.shape();
    if s.len() != 2 {
        return Err(Error::contract(format!("expected [L×d_c] child states, got {s:?}")));
    }
    if s[0] == 0 {
        return Err(Error::contract("cannot route an empty sequence"));
    }
    let (c, trace) = route_batch(p, params, h.reshape(vec![1, s[0], s[1]])?, &[s[0]])?;
    let cfg = &params.config;
    let c = c.reshape(vec![cfg.capsules, cfg.dim])?;
    Ok((c, trace.sentence(0, s[0], cfg.coupling_axis)?))
}

/// Routes a padded batch `h: [B×L×d_c]` into `[B×M×d_c]`; positions at or
/// beyond `lens[b]` neither vote nor receive coupling mass.
pub fn route_batch<'g, F: Real>(
    p: &Bound<'g, F>,
    params: &RoutingParams,
    h: Var<'g, F>,
    lens: &[usize],
) -> Result<(Var<'g, F>, RoutingTrace<F>)> {
    let cfg = &params.config;
    cfg.validate()?;
    let s = h.shape();
    let (m, d) = (cfg.capsules, cfg.dim);
    if s.len() != 3 || s[2] != d {
        return Err(Error::Shape { op: "route", lhs: s, rhs: vec![lens.len(), usize::MAX, d] });
    }
    let (batch, l) = (s[0], s[1]);
    if l == 0 {
        return Err(Error::contract("cannot route an empty sequence"));
    }
    if lens.len() != batch || lens.iter().any(|&n| n == 0 || n > l) {
        return Err(Error::contract(format!("lengths {lens:?} do not fit a batch of {batch}×{l}")));
    }
    let g = h.graph();
    let padded = lens.iter().any(|&n| n < l);
    let mask = padded.then(|| {
        g.constant(Tensor::from_fn(vec![batch, l, 1], |k| {
            if k % l < lens[k / l] { F::one() } else { F::zero() }
        }))
    });
    let hp = if cfg.positional {
        h.add(g.constant(positions_from_one(l, d)?))?
    } else {
        h
    };
    let flat = hp.reshape(vec![batch * l, d])?;
    let parent_pe = if cfg.positional {
        Some(g.constant(positions_from_one(m, d)?))
    } else {
        None
    };
    let g_children = match (cfg.scoring, &params.scorer) {
        (Scoring::Dot, _) => None,
        (Scoring::Separable, Some(sc)) => Some(sc.apply(p, hp)?),
        (Scoring::Separable, None) => {
            return Err(Error::contract("separable scoring configured without scorer parameters"));
        }
    };
    let children_bias = match (cfg.coupling_axis, mask) {
        (CouplingAxis::Children, Some(mk)) => Some(mk.add_scalar(-F::one()).scale(F::of(1e9))),
        _ => None,
    };

    let mut b = g.constant(Tensor::zeros(vec![batch, l, m]));
    let mut trace = RoutingTrace { alpha: Vec::new(), logits: Vec::new(), entropy: Vec::new() };
    let mut shared_votes = None;
    let mut parents = None;
    for t in 0..cfg.iterations {
        let mut alpha = match cfg.coupling_axis {
            CouplingAxis::Parents => b.softmax(2)?,
            CouplingAxis::Children => match children_bias {
                Some(bias) => b.add(bias)?.softmax(1)?,
                None => b.softmax(1)?,
            },
        };
        if let Some(mk) = mask {
            alpha = alpha.mul(mk)?;
        }
        let a = alpha.value();
        trace.entropy.push(mean_entropy(&a, lens, cfg.coupling_axis));
        trace.alpha.push(a);
        trace.logits.push(b.value());

        let votes = match shared_votes {
            Some(v) => v,
            None => {
                let v = flat
                    .matmul(p.get(params.transform(t)))?
                    .relu()
                    .reshape(vec![batch, l, m, d])?;
                if params.transforms.len() == 1 {
                    shared_votes = Some(v);
                }
                v
            }
        };
        let c = aggregate_parents(alpha, votes)?;
        parents = Some(c);
        if t + 1 == cfg.iterations {
            // the final logit update would not reach the output
            break;
        }
        let cp = match parent_pe {
            Some(pe) => c.add(pe)?,
            None => c,
        };
        let delta = match (&g_children, &params.scorer) {
            (Some(gc), Some(sc)) => separable_agreement(sc.apply(p, cp)?, *gc)?,
            _ => dot_agreement(cp, votes)?,
        };
        b = b.add(delta)?;
    }
    Ok((parents.expect("at least one iteration"), trace))
}

#[cfg(test)]
mod tests {
    use super::super::{CapsuleConfig, Sharing};
    use super::*;
    use crate::nn::ParamSet;
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &CapsuleConfig, seed: u64) -> (ParamSet<f64>, RoutingParams) {
        let mut ps = ParamSet::new();
        let rp = RoutingParams::init(&mut ps, "r", cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (ps, rp)
    }

    #[test]
    fn single_child_single_parent() {
        let cfg = CapsuleConfig {
            capsules: 1,
            iterations: 1,
            dim: 2,
            positional: false,
            sharing: Sharing::Shared,
            scoring: Scoring::Dot,
            ..Default::default()
        };
        let (mut ps, rp) = setup(&cfg, 0);
        ps.set(rp.transforms[0], Tensor::eye(2)).unwrap();
        let g = Graph::eval();
        let p = ps.bind(&g);
        let h = g.constant(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        let (c, trace) = dynamic_route(&p, &rp, h).unwrap();
        assert_eq!(c.value().data(), &[0.5, 0.0]);
        assert_eq!(trace.iterations(), 1);
    }

    #[test]
    fn padded_batch_matches_individual_sentences() {
        for scoring in [Scoring::Dot, Scoring::Separable] {
            for axis in [CouplingAxis::Parents, CouplingAxis::Children] {
                let cfg = CapsuleConfig {
                    capsules: 3,
                    iterations: 3,
                    dim: 4,
                    scoring,
                    coupling_axis: axis,
                    ..Default::default()
                };
                let (ps, rp) = setup(&cfg, 3);
                let mut rng = ChaCha8Rng::seed_from_u64(4);
                let a = Tensor::<f64>::uniform(vec![5, 4], -1.0, 1.0, &mut rng);
                let b = Tensor::<f64>::uniform(vec![2, 4], -1.0, 1.0, &mut rng);
                let mut data = a.to_vec();
                data.extend(b.to_vec());
                data.extend(vec![7.0; 12]);
                let g = Graph::eval();
                let p = ps.bind(&g);
                let batch = g.constant(Tensor::new(vec![2, 5, 4], data).unwrap());
                let (cb, tb) = route_batch(&p, &rp, batch, &[5, 2]).unwrap();
                let (ca, ta) = dynamic_route(&p, &rp, g.constant(a)).unwrap();
                let (cs, ts) = dynamic_route(&p, &rp, g.constant(b)).unwrap();
                let cb = cb.value();
                let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
                assert!(close(&cb.data()[..12], ca.value().data()));
                assert!(close(&cb.data()[12..], cs.value().data()));
                let short = tb.sentence(1, 2, axis).unwrap();
                for t in 0..3 {
                    assert!(close(short.alpha[t].data(), ts.alpha[t].data()));
                    assert!((short.entropy[t] - ts.entropy[t]).abs() < 1e-12);
                    assert!(ta.alpha[t].shape() == [5, 3]);
                }
            }
        }
    }

    #[test]
    fn csv_export_has_one_row_per_coupling() {
        let cfg = CapsuleConfig { capsules: 2, iterations: 3, dim: 4, ..Default::default() };
        let (ps, rp) = setup(&cfg, 1);
        let g = Graph::eval();
        let p = ps.bind(&g);
        let h = g.constant(Tensor::<f64>::uniform(vec![3, 4], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let (_, trace) = dynamic_route(&p, &rp, h).unwrap();
        let mut out = Vec::new();
        trace.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,child,parent,alpha,b");
        assert_eq!(lines.len(), 1 + 3 * 3 * 2);
        assert!(lines[1].starts_with("1,0,0,0.5,0"));
        assert!(lines.last().unwrap().starts_with("3,2,1,"));
    }

    #[test]
    fn rejects_empty_and_bad_lengths() {
        let cfg = CapsuleConfig { capsules: 2, iterations: 1, dim: 4, ..Default::default() };
        let (ps, rp) = setup(&cfg, 1);
        let g = Graph::eval();
        let p = ps.bind(&g);
        let h = g.constant(Tensor::<f64>::zeros(vec![1, 3, 4]));
        assert!(route_batch(&p, &rp, h, &[4]).is_err());
        assert!(route_batch(&p, &rp, h, &[0]).is_err());
        let wrong = g.constant(Tensor::<f64>::zeros(vec![3, 5]));
        assert!(matches!(dynamic_route(&p, &rp, wrong), Err(Error::Shape { .. })));
    }
}
