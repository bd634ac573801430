//! Encoder, fixed-size aggregation and conditional decoder.

mod batch;
mod config;
mod loss;

pub use batch::Batch;
pub use config::{Aggregation, ModelConfig};
pub use loss::{label_smoothed_loss, token_accuracy};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::{pooling_batch, route_batch, RoutingParams, RoutingTrace};
use crate::error::{Error, Result};
use crate::nn::{layer_norm, lstm_cell, BiLstmStack, Bound, Dropout, Init, LayerNormParams, LstmParams, ParamId, ParamSet};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

#[derive(Debug, Clone)]
struct Layout {
    src_embed: ParamId,
    tgt_embed: ParamId,
    encoder: BiLstmStack,
    routing: Option<RoutingParams>,
    w_c: ParamId,
    decoder: Vec<LstmParams>,
    decoder_norms: Vec<LayerNormParams>,
    w_o: ParamId,
}

/// The translation model: parameters plus the structure that reads them.
#[derive(Debug, Clone)]
pub struct Seq2Seq<F: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    layout: Layout,
}

/// Fixed-size summary of one source sentence.
#[derive(Debug, Clone)]
pub struct SourceContext<F: Real = f32> {
    /// `[rows×2·hidden]` capsules or pooled vectors.
    pub capsules: Tensor<F>,
    /// `[1×embed_dim]` projection of the flattened capsules, added to every
    /// decoder input.
    pub projected: Tensor<F>,
    pub trace: Option<RoutingTrace<F>>,
}

/// Hidden and cell state of every decoder layer, one row per hypothesis.
#[derive(Debug, Clone)]
pub struct DecoderState<F: Real = f32> {
    pub h: Vec<Tensor<F>>,
    pub c: Vec<Tensor<F>>,
}

impl<F: Real> DecoderState<F> {
    pub fn rows(&self) -> usize {
        self.h[0].shape()[0]
    }

    /// A state made of the given rows, e.g. the surviving beam hypotheses.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let pick = |t: &Tensor<F>| -> Result<Tensor<F>> {
            let d = t.shape()[1];
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= t.shape()[0] {
                    return Err(Error::Index { what: "decoder row", index: r, bound: t.shape()[0] });
                }
                data.extend_from_slice(t.row(r));
            }
            Tensor::new(vec![rows.len(), d], data)
        };
        Ok(Self {
            h: self.h.iter().map(pick).collect::<Result<_>>()?,
            c: self.c.iter().map(pick).collect::<Result<_>>()?,
        })
    }
}

/// Decoder state inside a graph.
pub struct GraphState<'g, F: Real> {
    pub h: Vec<Var<'g, F>>,
    pub c: Vec<Var<'g, F>>,
}

/// Result of a teacher-forced pass.
pub struct TrainOutput<'g, F: Real> {
    pub loss: Var<'g, F>,
    pub tokens: usize,
    pub correct: usize,
    pub trace: Option<RoutingTrace<F>>,
}

impl<F: Real> Seq2Seq<F> {
    /// Fresh parameters drawn from a ChaCha stream seeded with `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let c = &config;
        let (dx, d) = (c.embed_dim, c.hidden_dim);
        let std = 1.0 / (dx as f64).sqrt();
        let src_embed = ps.insert("src_embed", Tensor::normal(vec![c.src_vocab, dx], std, &mut rng))?;
        let tgt_embed = ps.insert("tgt_embed", Tensor::normal(vec![c.tgt_vocab, dx], std, &mut rng))?;
        let encoder = BiLstmStack::init(&mut ps, "encoder", dx, d, c.encoder_layers, &mut rng)?;
        let routing = match c.aggregation {
            Aggregation::Capsule => Some(RoutingParams::init(&mut ps, "routing", &c.capsule, &mut rng)?),
            Aggregation::Pooling => None,
        };
        let w_c = Init { rng: &mut rng }.xavier(c.context_rows() * 2 * d, dx);
        let w_c = ps.insert("context_proj", w_c)?;
        let mut decoder = Vec::new();
        let mut decoder_norms = Vec::new();
        for k in 0..c.decoder_layers {
            let din = if k == 0 { dx } else { d };
            decoder.push(LstmParams::init(&mut ps, &format!("decoder.layer{k}"), din, d, &mut rng)?);
            if k > 0 {
                decoder_norms.push(LayerNormParams::init(&mut ps, &format!("decoder.layer{k}.norm"), d)?);
            }
        }
        let w_o = Init { rng: &mut rng }.xavier(d, c.tgt_vocab);
        let w_o = ps.insert("output_proj", w_o)?;
        Ok(Self {
            config,
            params: ps,
            layout: Layout { src_embed, tgt_embed, encoder, routing, w_c, decoder, decoder_norms, w_o },
        })
    }

    /// A model for `config` carrying the given parameters, which must match
    /// the layout `init` produces by name and shape.
    pub fn with_params(config: ModelConfig, params: ParamSet<F>) -> Result<Self> {
        let mut model = Self::init(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, want, wt), (_, got, gt)) in model.params.iter().zip(params.iter()) {
            if want != got || wt.shape() != gt.shape() {
                return Err(Error::contract(format!(
                    "parameter {got} {:?} does not match expected {want} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn routing(&self) -> Option<&RoutingParams> {
        self.layout.routing.as_ref()
    }

    fn check_source(&self, src: &[usize]) -> Result<()> {
        if src.is_empty() || src.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "source length {} outside 1..={}",
                src.len(),
                self.config.max_len
            )));
        }
        if let Some(&t) = src.iter().find(|&&t| t >= self.config.src_vocab) {
            return Err(Error::Index { what: "source token", index: t, bound: self.config.src_vocab });
        }
        Ok(())
    }

    /// Encodes a padded `[B×len]` id matrix into the context `[B×rows×2d]`.
    pub fn encode_graph<'g>(
        &self,
        p: &Bound<'g, F>,
        src: &[usize],
        lens: &[usize],
        dropout: Option<&mut Dropout>,
    ) -> Result<(Var<'g, F>, Option<RoutingTrace<F>>)> {
        let batch = lens.len();
        if batch == 0 || !src.len().is_multiple_of(batch) {
            return Err(Error::contract("source ids do not form a [B×L] matrix"));
        }
        let len = src.len() / batch;
        let g = p.get(self.layout.src_embed).graph();
        let x = g
            .gather_rows(p.get(self.layout.src_embed), src)?
            .reshape(vec![batch, len, self.config.embed_dim])?;
        let h = self.layout.encoder.encode(p, x, lens, dropout)?;
        match &self.layout.routing {
            Some(rp) => {
                let (c, trace) = route_batch(p, rp, h, lens)?;
                Ok((c, Some(trace)))
            }
            None => Ok((pooling_batch(h, lens)?, None)),
        }
    }

    /// `W_c · flatten(C)` for a context batch `[B×rows×2d]`, giving `[B×d_x]`.
    pub fn project<'g>(&self, p: &Bound<'g, F>, context: Var<'g, F>) -> Result<Var<'g, F>> {
        let s = context.shape();
        context.reshape(vec![s[0], s[1] * s[2]])?.matmul(p.get(self.layout.w_c))
    }

    pub fn zero_state<'g>(&self, g: &'g Graph<F>, rows: usize) -> GraphState<'g, F> {
        let z = g.constant(Tensor::zeros(vec![rows, self.config.hidden_dim]));
        let n = self.config.decoder_layers;
        GraphState { h: vec![z; n], c: vec![z; n] }
    }

    /// One decoder step; returns the top-layer output `[B×d]`.
    pub fn decoder_step_graph<'g>(
        &self,
        p: &Bound<'g, F>,
        projected: Var<'g, F>,
        state: &mut GraphState<'g, F>,
        tokens: &[usize],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Var<'g, F>> {
        let table = p.get(self.layout.tgt_embed);
        let mut x = table.graph().gather_rows(table, tokens)?.add(projected)?;
        for (k, lp) in self.layout.decoder.iter().enumerate() {
            let (h, c) = lstm_cell(p, lp, state.h[k], state.c[k], x)?;
            state.h[k] = h;
            state.c[k] = c;
            let mut out = if k == 0 { h } else { layer_norm(p, &self.layout.decoder_norms[k - 1], h.add(x)?)? };
            if let Some(d) = dropout.as_deref_mut() {
                out = d.apply(out)?;
            }
            x = out;
        }
        Ok(x)
    }

    pub fn output_logits<'g>(&self, p: &Bound<'g, F>, top: Var<'g, F>) -> Result<Var<'g, F>> {
        top.matmul(p.get(self.layout.w_o))
    }

    /// Teacher-forced loss and token accuracy over a batch.
    pub fn forward_train<'g>(
        &self,
        p: &Bound<'g, F>,
        batch: &Batch,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<TrainOutput<'g, F>> {
        for &t in &batch.src {
            if t >= self.config.src_vocab {
                return Err(Error::Index { what: "source token", index: t, bound: self.config.src_vocab });
            }
        }
        let (context, trace) = self.encode_graph(p, &batch.src, &batch.src_lens, dropout.as_deref_mut())?;
        let projected = self.project(p, context)?;
        let g = projected.graph();
        let mut state = self.zero_state(g, batch.size);
        let mut rows = Vec::with_capacity(batch.tgt_len);
        let mut targets = Vec::with_capacity(batch.tgt_len * batch.size);
        for t in 0..batch.tgt_len {
            let tokens: Vec<usize> = (0..batch.size).map(|b| batch.tgt_in[b * batch.tgt_len + t]).collect();
            rows.push(self.decoder_step_graph(p, projected, &mut state, &tokens, dropout.as_deref_mut())?);
            targets.extend((0..batch.size).map(|b| batch.tgt_out[b * batch.tgt_len + t]));
        }
        let logits = self.output_logits(p, g.concat(&rows, 0)?)?;
        let loss = label_smoothed_loss(logits, &targets, self.config.label_smoothing)?;
        let (correct, tokens) = token_accuracy(&logits.value(), &targets);
        Ok(TrainOutput { loss, tokens, correct, trace })
    }

    /// Encodes one sentence outside any caller graph.
    pub fn encode(&self, src: &[usize]) -> Result<SourceContext<F>> {
        self.check_source(src)?;
        let g = Graph::eval();
        let p = self.params.bind(&g);
        let (context, trace) = self.encode_graph(&p, src, &[src.len()], None)?;
        let projected = self.project(&p, context)?.value();
        let s = context.shape();
        let trace = match trace {
            Some(t) => Some(t.sentence(0, src.len(), self.config.capsule.coupling_axis)?),
            None => None,
        };
        Ok(SourceContext { capsules: context.value().reshape(vec![s[1], s[2]])?, projected, trace })
    }

    pub fn initial_state(&self, rows: usize) -> DecoderState<F> {
        let z = Tensor::zeros(vec![rows, self.config.hidden_dim]);
        let n = self.config.decoder_layers;
        DecoderState { h: vec![z.clone(); n], c: vec![z; n] }
    }

    /// Advances `state` by one token per row; `projected` is `[1×d_x]`
    /// (shared by all rows) or `[rows×d_x]`. Returns logits `[rows×V]`.
    pub fn decode_rows(
        &self,
        projected: &Tensor<F>,
        state: &DecoderState<F>,
        tokens: &[usize],
    ) -> Result<(Tensor<F>, DecoderState<F>)> {
        if state.h.len() != self.config.decoder_layers || state.rows() != tokens.len() {
            return Err(Error::contract(format!(
                "decoder state has {} layers × {} rows for {} tokens",
                state.h.len(),
                state.rows(),
                tokens.len()
            )));
        }
        let g = Graph::eval();
        let p = self.params.bind(&g);
        let mut gs = GraphState {
            h: state.h.iter().map(|t| g.constant(t.clone())).collect(),
            c: state.c.iter().map(|t| g.constant(t.clone())).collect(),
        };
        let top = self.decoder_step_graph(&p, g.constant(projected.clone()), &mut gs, tokens, None)?;
        let logits = self.output_logits(&p, top)?.value();
        let next = DecoderState {
            h: gs.h.iter().map(Var::value).collect(),
            c: gs.c.iter().map(Var::value).collect(),
        };
        Ok((logits, next))
    }

    /// One step for a single hypothesis; logits are `[V]`.
    pub fn decode_step(
        &self,
        ctx: &SourceContext<F>,
        state: &DecoderState<F>,
        y_prev: usize,
    ) -> Result<(Tensor<F>, DecoderState<F>)> {
        let (logits, next) = self.decode_rows(&ctx.projected, state, &[y_prev])?;
        Ok((logits.reshape(vec![self.config.tgt_vocab])?, next))
    }
}
