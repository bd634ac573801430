//! Central finite-difference verification of analytic gradients.

use super::{Graph, Mode, Real, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Coordinates to probe; `None` probes all of them.
    pub max_coords: Option<usize>,
}

impl FdOptions {
    pub fn new(eps: f64, tol: f64) -> Self {
        Self {
            eps,
            tol,
            max_coords: None,
        }
    }

    /// The module-wide setting for a given float width: `eps=1e-3, tol=1e-3`
    /// in 32-bit and `eps=1e-5, tol=1e-6` in 64-bit.
    pub fn for_width<F: Real>() -> Self {
        if F::BITS == 64 {
            Self::new(1e-5, 1e-6)
        } else {
            Self::new(1e-3, 1e-3)
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Largest `|analytic - numeric| / max(1, |analytic|, |numeric|)` seen.
    pub max_rel_error: f64,
    pub worst_coord: Option<usize>,
    pub checked: usize,
    /// Coordinates whose ±eps neighbourhood crosses a ReLU or argmax kink,
    /// where central differences do not estimate the derivative.
    pub skipped: usize,
    pub passed: bool,
}

/// Compares the tape gradient of the scalar `f` at `x` against central
/// differences.
///
/// `f` must be deterministic: it is evaluated twice at `x` and any bitwise
/// difference is reported as a contract error.
pub fn finite_difference_check<F, Func>(f: Func, x: &Tensor<F>, opts: FdOptions) -> Result<FdReport>
where
    F: Real,
    Func: for<'g> Fn(&'g Graph<F>, Var<'g, F>) -> Result<Var<'g, F>>,
{
    let eval = |point: &Tensor<F>| -> Result<(F, u64)> {
        let g = Graph::new(Mode::Eval);
        g.track_kinks(true);
        let xv = g.constant(point.clone());
        let y = f(&g, xv)?;
        Ok((y.value().item()?, g.kink_signature()))
    };

    let g = Graph::new(Mode::Record);
    let xv = g.param(x.clone());
    let y = f(&g, xv)?;
    let y0 = y.value().item()?;
    g.backward(y)?;
    let analytic = g
        .grad(xv)
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let (base, base_sig) = eval(x)?;
    let (again, _) = eval(x)?;
    if base.bits() != again.bits() || base.bits() != y0.bits() {
        return Err(Error::contract(format!(
            "function is not deterministic: {y0} / {base} / {again}"
        )));
    }

    let n = x.numel();
    let coords: Vec<usize> = match opts.max_coords {
        Some(k) if k < n => (0..k).map(|i| i * n / k).collect(),
        _ => (0..n).collect(),
    };

    let eps = F::of(opts.eps);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_coord: None,
        checked: 0,
        skipped: 0,
        passed: true,
    };
    let mut buf = x.to_vec();
    for &c in &coords {
        let orig = buf[c];
        let plus = orig + eps;
        let minus = orig - eps;
        buf[c] = plus;
        let (fp, sp) = eval(&Tensor::from_parts(x.shape().to_vec(), buf.clone()))?;
        buf[c] = minus;
        let (fm, sm) = eval(&Tensor::from_parts(x.shape().to_vec(), buf.clone()))?;
        buf[c] = orig;
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        // the realised step after rounding, not the nominal 2·eps
        let width = plus.f64() - minus.f64();
        let numeric = (fp.f64() - fm.f64()) / width;
        let a = analytic.data()[c].f64();
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.checked += 1;
        if report.worst_coord.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = Some(c);
        }
    }
    report.passed = report.max_rel_error <= opts.tol && report.checked > 0;
    Ok(report)
}
