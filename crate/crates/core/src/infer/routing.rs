use crate::capsule::RoutingTrace;
use crate::error::{Error, Result};
use crate::model::Seq2Seq;
use crate::tensor::Real;

/// The full routing trace of one source sentence.
pub fn inspect_routing<F: Real>(model: &Seq2Seq<F>, src: &[usize]) -> Result<RoutingTrace<F>> {
    model
        .encode(src)?
        .trace
        .ok_or_else(|| Error::Config("routing inspection needs capsule aggregation".into()))
}

/// Fraction of final-iteration coupling coefficients within `tol` of 0 or 1.
pub fn sharpness<F: Real>(trace: &RoutingTrace<F>, tol: f64) -> f64 {
    let Some(last) = trace.alpha.last() else {
        return 0.0;
    };
    let near = last
        .data()
        .iter()
        .filter(|a| {
            let a = a.f64();
            a <= tol || a >= 1.0 - tol
        })
        .count();
    near as f64 / last.numel() as f64
}
