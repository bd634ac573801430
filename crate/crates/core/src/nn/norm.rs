use super::params::{Bound, ParamId, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor, Var};

/// Gain and bias of a layer normalisation over the last axis.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNormParams {
    /// Unit gain, zero bias.
    pub fn init<F: Real>(ps: &mut ParamSet<F>, prefix: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: ps.insert(format!("{prefix}.gain"), Tensor::ones(vec![dim]))?,
            bias: ps.insert(format!("{prefix}.bias"), Tensor::zeros(vec![dim]))?,
            dim,
            eps: 1e-5,
        })
    }
}

/// Normalises `x` over its last axis to zero mean and unit variance, then
/// applies the learned gain and bias.
pub fn layer_norm<'g, F: Real>(
    p: &Bound<'g, F>,
    params: &LayerNormParams,
    x: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let shape = x.shape();
    let axis = shape.len().checked_sub(1).ok_or(Error::Axis { axis: 0, rank: 0 })?;
    if shape[axis] != params.dim {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: shape,
            rhs: vec![params.dim],
        });
    }
    let centred = x.sub(x.mean(axis, true)?)?;
    let var = centred.mul(centred)?.mean(axis, true)?;
    let inv = var.add_scalar(F::of(params.eps)).powf(F::of(-0.5));
    centred
        .mul(inv)?
        .mul(p.get(params.gain))?
        .add(p.get(params.bias))
}
