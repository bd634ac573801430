use super::PAD;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Cross-entropy of `logits: [N×V]` against targets smoothed to
/// `1−ε+ε/V` on the gold class and `ε/V` elsewhere, averaged over the rows
/// whose target is not padding.
pub fn label_smoothed_loss<'g, F: Real>(logits: Var<'g, F>, targets: &[usize], eps: f64) -> Result<Var<'g, F>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Shape { op: "label_smoothed_loss", lhs: s, rhs: vec![targets.len()] });
    }
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::contract(format!("label smoothing {eps} outside [0,1)")));
    }
    let v = s[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Index { what: "target token", index: t, bound: v });
    }
    let real = targets.iter().filter(|&&t| t != PAD).count();
    if real == 0 {
        return Err(Error::contract("every target position is padding"));
    }
    let off = eps / v as f64;
    let on = 1.0 - eps + off;
    let q = Tensor::from_fn(vec![targets.len(), v], |k| {
        let t = targets[k / v];
        F::of(if t == PAD {
            0.0
        } else if k % v == t {
            on
        } else {
            off
        })
    });
    let logp = logits.log_softmax(1)?;
    Ok(logp
        .mul(logits.graph().constant(q))?
        .sum_all()
        .scale(F::of(-1.0 / real as f64)))
}

/// `(correct, counted)` argmax matches over non-padding targets; ties go
/// to the lower index.
pub fn token_accuracy<F: Real>(logits: &Tensor<F>, targets: &[usize]) -> (usize, usize) {
    let v = logits.shape()[1];
    let mut correct = 0;
    let mut counted = 0;
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        counted += 1;
        let row = &logits.data()[i * v..(i + 1) * v];
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (j, &x)| if x > row[b] { j } else { b });
        correct += usize::from(best == t);
    }
    (correct, counted)
}
