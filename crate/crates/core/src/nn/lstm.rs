//! LSTM cells and the bidirectional encoder stack.

use rand_chacha::ChaCha8Rng;

use super::norm::{layer_norm, LayerNormParams};
use super::params::{Bound, Init, ParamId, ParamSet};
use super::Dropout;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Weights of one LSTM direction. Gate blocks are ordered
/// input, forget, candidate, output along the `4·hidden` axis.
#[derive(Debug, Clone)]
pub struct LstmParams {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub hidden: usize,
}

impl LstmParams {
    /// Uniform `±1/√hidden` weights, zero bias except the forget block at 1.
    pub fn init<F: Real>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut init = Init { rng };
        let w_ih = init.uniform(vec![d_in, 4 * hidden], bound);
        let w_hh = init.uniform(vec![hidden, 4 * hidden], bound);
        let bias = Tensor::from_fn(vec![4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) {
                F::one()
            } else {
                F::zero()
            }
        });
        Self::from_tensors(ps, prefix, w_ih, w_hh, bias)
    }

    pub fn from_tensors<F: Real>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        w_ih: Tensor<F>,
        w_hh: Tensor<F>,
        bias: Tensor<F>,
    ) -> Result<Self> {
        let (d_in, four_h) = match w_ih.shape() {
            &[a, b] => (a, b),
            s => {
                return Err(Error::contract(format!("w_ih must be a matrix, got {s:?}")));
            }
        };
        let hidden = four_h / 4;
        if four_h % 4 != 0
            || w_hh.shape() != [hidden, four_h]
            || bias.shape() != [four_h]
        {
            return Err(Error::Shape {
                op: "lstm params",
                lhs: w_ih.shape().to_vec(),
                rhs: w_hh.shape().to_vec(),
            });
        }
        Ok(Self {
            w_ih: ps.insert(format!("{prefix}.w_ih"), w_ih)?,
            w_hh: ps.insert(format!("{prefix}.w_hh"), w_hh)?,
            bias: ps.insert(format!("{prefix}.bias"), bias)?,
            d_in,
            hidden,
        })
    }
}

fn expect_cols<F: Real>(v: Var<'_, F>, cols: usize, what: &'static str) -> Result<usize> {
    let s = v.shape();
    if s.len() != 2 || s[1] != cols {
        return Err(Error::Shape {
            op: what,
            lhs: s,
            rhs: vec![usize::MAX, cols],
        });
    }
    Ok(s[0])
}

/// One LSTM step over a batch of rows: `h_prev, c_prev: [B×d]`, `x: [B×d_in]`.
/// A single vector is a one-row batch.
pub fn lstm_cell<'g, F: Real>(
    p: &Bound<'g, F>,
    params: &LstmParams,
    h_prev: Var<'g, F>,
    c_prev: Var<'g, F>,
    x: Var<'g, F>,
) -> Result<(Var<'g, F>, Var<'g, F>)> {
    let d = params.hidden;
    let b = expect_cols(x, params.d_in, "lstm input")?;
    if expect_cols(h_prev, d, "lstm hidden")? != b || expect_cols(c_prev, d, "lstm cell")? != b {
        return Err(Error::Shape {
            op: "lstm batch",
            lhs: x.shape(),
            rhs: h_prev.shape(),
        });
    }
    let gates = x
        .matmul(p.get(params.w_ih))?
        .add(h_prev.matmul(p.get(params.w_hh))?)?
        .add(p.get(params.bias))?;
    let input = gates.narrow(1, 0, d)?.sigmoid();
    let forget = gates.narrow(1, d, d)?.sigmoid();
    let candidate = gates.narrow(1, 2 * d, d)?.tanh();
    let output = gates.narrow(1, 3 * d, d)?.sigmoid();
    let c = forget.mul(c_prev)?.add(input.mul(candidate)?)?;
    let h = output.mul(c.tanh())?;
    Ok((h, c))
}

/// Forward and backward directions of one bidirectional layer.
#[derive(Debug, Clone)]
pub struct BiLstmLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Stacked BiLSTM. Layers after the first add a residual connection from
/// their input and apply layer normalisation to the sum.
#[derive(Debug, Clone)]
pub struct BiLstmStack {
    pub layers: Vec<BiLstmLayer>,
    pub norms: Vec<LayerNormParams>,
    pub d_in: usize,
    pub hidden: usize,
}

impl BiLstmStack {
    pub fn init<F: Real>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        depth: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("encoder depth must be at least 1".into()));
        }
        let mut layers = Vec::with_capacity(depth);
        let mut norms = Vec::new();
        for k in 0..depth {
            let din = if k == 0 { d_in } else { 2 * hidden };
            layers.push(BiLstmLayer {
                forward: LstmParams::init(ps, &format!("{prefix}.layer{k}.fwd"), din, hidden, rng)?,
                backward: LstmParams::init(ps, &format!("{prefix}.layer{k}.bwd"), din, hidden, rng)?,
            });
            if k > 0 {
                norms.push(LayerNormParams::init(ps, &format!("{prefix}.layer{k}.norm"), 2 * hidden)?);
            }
        }
        Ok(Self {
            layers,
            norms,
            d_in,
            hidden,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.hidden
    }

    /// Encodes a padded batch `x: [B×L×d_in]` whose row `b` holds `lens[b]`
    /// real positions followed by padding; returns `[B×L×2·hidden]`.
    ///
    /// The backward direction holds a zero state across padding so each
    /// sentence sees only its own tokens.
    pub fn encode<'g, F: Real>(
        &self,
        p: &Bound<'g, F>,
        x: Var<'g, F>,
        lens: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var<'g, F>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.d_in {
            return Err(Error::Shape {
                op: "bilstm input",
                lhs: shape,
                rhs: vec![lens.len(), usize::MAX, self.d_in],
            });
        }
        let (batch, len) = (shape[0], shape[1]);
        if lens.len() != batch || lens.iter().any(|&l| l == 0 || l > len) {
            return Err(Error::contract(format!(
                "sequence lengths {lens:?} do not fit a batch of {batch}×{len}"
            )));
        }
        let g = x.graph();
        let masks = PadMasks::new(g, lens, len);
        let mut input = x;
        for (k, layer) in self.layers.iter().enumerate() {
            let din = input.shape()[2];
            let steps: Vec<Var<'g, F>> = (0..len)
                .map(|t| input.narrow(1, t, 1)?.reshape(vec![batch, din]))
                .collect::<Result<_>>()?;
            let fwd = run_direction(p, &layer.forward, &steps, (0..len).collect(), None)?;
            let bwd = run_direction(p, &layer.backward, &steps, (0..len).rev().collect(), Some(&masks))?;
            let mut rows = Vec::with_capacity(len);
            for t in 0..len {
                rows.push(
                    g.concat(&[fwd[t], bwd[t]], 1)?
                        .reshape(vec![batch, 1, 2 * self.hidden])?,
                );
            }
            let mut out = g.concat(&rows, 1)?;
            if let Some(m) = &masks.sequence {
                out = out.mul(*m)?;
            }
            if k > 0 {
                out = layer_norm(p, &self.norms[k - 1], out.add(input)?)?;
            }
            if let Some(d) = dropout.as_deref_mut() {
                out = d.apply(out)?;
            }
            input = out;
        }
        Ok(input)
    }
}

/// Per-step `[B×1]` keep/hold masks and a `[B×L×1]` sequence mask; all
/// `None` when the batch has no padding.
struct PadMasks<'g, F: Real> {
    step: Vec<Option<(Var<'g, F>, Var<'g, F>)>>,
    sequence: Option<Var<'g, F>>,
}

impl<'g, F: Real> PadMasks<'g, F> {
    fn new(g: &'g Graph<F>, lens: &[usize], len: usize) -> Self {
        let batch = lens.len();
        let step = (0..len)
            .map(|t| {
                if lens.iter().all(|&l| t < l) {
                    return None;
                }
                let keep = Tensor::from_fn(vec![batch, 1], |b| if t < lens[b] { F::one() } else { F::zero() });
                let hold = keep.map(|v| F::one() - v);
                Some((g.constant(keep), g.constant(hold)))
            })
            .collect();
        let sequence = lens.iter().any(|&l| l < len).then(|| {
            g.constant(Tensor::from_fn(vec![batch, len, 1], |i| {
                if i % len < lens[i / len] {
                    F::one()
                } else {
                    F::zero()
                }
            }))
        });
        Self { step, sequence }
    }
}

/// Runs one direction over `order`, returning hidden states indexed by position.
fn run_direction<'g, F: Real>(
    p: &Bound<'g, F>,
    params: &LstmParams,
    steps: &[Var<'g, F>],
    order: Vec<usize>,
    masks: Option<&PadMasks<'g, F>>,
) -> Result<Vec<Var<'g, F>>> {
    let g = steps[0].graph();
    let batch = steps[0].shape()[0];
    let zero = g.constant(Tensor::zeros(vec![batch, params.hidden]));
    let (mut h, mut c) = (zero, zero);
    let mut out = vec![zero; steps.len()];
    for t in order {
        let (hn, cn) = lstm_cell(p, params, h, c, steps[t])?;
        match masks.and_then(|m| m.step[t]) {
            Some((keep, hold)) => {
                h = hn.mul(keep)?.add(h.mul(hold)?)?;
                c = cn.mul(keep)?.add(c.mul(hold)?)?;
            }
            None => (h, c) = (hn, cn),
        }
        out[t] = h;
    }
    Ok(out)
}

/// Encodes one sentence `x: [L×d_in]` into `[L×2·hidden]`.
pub fn bilstm_encode<'g, F: Real>(
    p: &Bound<'g, F>,
    stack: &BiLstmStack,
    x: Var<'g, F>,
) -> Result<Var<'g, F>> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::contract(format!("expected [L×d] input, got {shape:?}")));
    }
    if shape[0] == 0 {
        return Err(Error::contract("empty sequence"));
    }
    let l = shape[0];
    let h = stack.encode(p, x.reshape(vec![1, l, shape[1]])?, &[l], None)?;
    h.reshape(vec![l, stack.output_dim()])
}
