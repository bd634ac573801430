use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{DecoderState, Seq2Seq, SourceContext, BOS, EOS};
use crate::tensor::{Real, Tensor};

/// Next-token distributions for a set of partial outputs.
///
/// A state holds any number of rows, one per hypothesis. Decoding starts
/// from a single row that has consumed nothing.
pub trait StepScorer {
    type State;

    fn vocab(&self) -> usize;

    fn initial(&self) -> Result<Self::State>;

    /// Feeds one token per row and returns the log-probabilities of the next
    /// token, `rows × vocab`, along with the advanced state.
    fn advance(&self, state: &Self::State, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, Self::State)>;

    /// A state made of the given rows, in order.
    fn select(&self, state: &Self::State, rows: &[usize]) -> Result<Self::State>;
}

/// Adapts a model and an encoded source sentence to [`StepScorer`].
pub struct ModelScorer<'m, F: Real> {
    pub model: &'m Seq2Seq<F>,
    pub context: SourceContext<F>,
}

impl<'m, F: Real> ModelScorer<'m, F> {
    pub fn new(model: &'m Seq2Seq<F>, src: &[usize]) -> Result<Self> {
        Ok(Self { model, context: model.encode(src)? })
    }
}

impl<F: Real> StepScorer for ModelScorer<'_, F> {
    type State = DecoderState<F>;

    fn vocab(&self) -> usize {
        self.model.config.tgt_vocab
    }

    fn initial(&self) -> Result<DecoderState<F>> {
        Ok(self.model.initial_state(1))
    }

    fn advance(&self, state: &DecoderState<F>, tokens: &[usize]) -> Result<(Vec<Vec<f64>>, DecoderState<F>)> {
        let (logits, next) = self.model.decode_rows(&self.context.projected, state, tokens)?;
        Ok((log_softmax_rows(&logits), next))
    }

    fn select(&self, state: &DecoderState<F>, rows: &[usize]) -> Result<DecoderState<F>> {
        state.select(rows)
    }
}

/// Row-wise log-softmax of a `[rows×V]` tensor, in f64.
pub fn log_softmax_rows<F: Real>(logits: &Tensor<F>) -> Vec<Vec<f64>> {
    let v = logits.shape()[logits.rank() - 1];
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x.f64() - max).exp()).sum::<f64>().ln();
            row.iter().map(|x| x.f64() - lse).collect()
        })
        .collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// A partial or complete output sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    /// Emitted tokens, excluding the start symbol; ends with eos iff finished.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Tokens with a trailing eos removed.
    pub fn output(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }

    /// `log_prob / ((5 + |y|) / 6)^alpha`, with `|y|` counting the eos.
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Repeatedly emits the most likely token until eos or `max_len` tokens.
/// The result includes the eos when one was produced.
pub fn greedy_search<S: StepScorer>(scorer: &S, max_len: usize) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let mut state = scorer.initial()?;
    let mut prev = BOS;
    let mut out = Vec::new();
    while out.len() < max_len {
        let (logp, next) = scorer.advance(&state, &[prev])?;
        prev = argmax(&logp[0]);
        out.push(prev);
        if prev == EOS {
            break;
        }
        state = next;
    }
    Ok(out)
}

/// Beam search keeping `beam` live hypotheses.
///
/// Each step ranks every one-token extension of the live hypotheses by
/// log-probability (ties go to the earlier hypothesis, then the lower token)
/// and keeps the best `beam`; extensions ending in eos retire to the finished
/// pool. Finished hypotheses are compared with [`BeamHypothesis::score`]. If
/// none finish within `max_len` tokens the best live one is returned.
pub fn beam_search_with<S: StepScorer>(scorer: &S, beam: usize, alpha: f64, max_len: usize) -> Result<BeamHypothesis> {
    if beam == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    if !(alpha >= 0.0) {
        return Err(Error::contract(format!("length penalty alpha must be non-negative, got {alpha}")));
    }
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    let vocab = scorer.vocab();
    let mut state = scorer.initial()?;
    let mut live = vec![BeamHypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..max_len {
        let prev: Vec<usize> = live.iter().map(|h| h.tokens.last().copied().unwrap_or(BOS)).collect();
        let (logp, next) = scorer.advance(&state, &prev)?;
        let mut cands: Vec<(usize, usize, f64)> = Vec::with_capacity(live.len() * vocab);
        for (r, (h, row)) in live.iter().zip(&logp).enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                cands.push((r, tok, h.log_prob + lp));
            }
        }
        // Stable sort keeps (row, token) order among equal scores.
        cands.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
        let mut rows = Vec::new();
        let mut survivors = Vec::new();
        for &(r, tok, lp) in cands.iter().take(beam) {
            let mut tokens = live[r].tokens.clone();
            tokens.push(tok);
            if tok == EOS {
                finished.push(BeamHypothesis { tokens, log_prob: lp, finished: true });
            } else {
                rows.push(r);
                survivors.push(BeamHypothesis { tokens, log_prob: lp, finished: false });
            }
        }
        if survivors.is_empty() {
            live.clear();
            break;
        }
        state = scorer.select(&next, &rows)?;
        live = survivors;
    }
    let best = |pool: Vec<BeamHypothesis>, alpha: f64| {
        pool.into_iter().reduce(|a, b| if b.score(alpha) > a.score(alpha) { b } else { a })
    };
    match best(finished, alpha) {
        Some(h) => Ok(h),
        None => best(live, 0.0).ok_or_else(|| Error::contract("beam search produced no hypothesis")),
    }
}

/// Greedy translation of one source sentence, without the trailing eos.
pub fn greedy_decode<F: Real>(model: &Seq2Seq<F>, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let mut out = greedy_search(&ModelScorer::new(model, src)?, max_len)?;
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok(out)
}

/// Beam-search translation of one source sentence, without the trailing eos.
pub fn beam_search<F: Real>(
    model: &Seq2Seq<F>,
    src: &[usize],
    beam: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<usize>> {
    let h = beam_search_with(&ModelScorer::new(model, src)?, beam, alpha, max_len)?;
    Ok(h.output().to_vec())
}

/// Decoding strategy for batch translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchConfig {
    pub beam: usize,
    pub alpha: f64,
    pub max_len: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { beam: 8, alpha: 0.8, max_len: 256 }
    }
}

impl SearchConfig {
    pub fn translate<F: Real>(&self, model: &Seq2Seq<F>, src: &[usize]) -> Result<Vec<usize>> {
        if self.beam == 1 {
            greedy_decode(model, src, self.max_len)
        } else {
            beam_search(model, src, self.beam, self.alpha, self.max_len)
        }
    }
}

/// Translates every sentence, splitting the work over `threads` workers that
/// share the read-only model. Output order matches input order.
pub fn translate_all<F: Real>(
    model: &Seq2Seq<F>,
    sources: &[Vec<usize>],
    search: SearchConfig,
    threads: usize,
) -> Result<Vec<Vec<usize>>> {
    let threads = threads.clamp(1, sources.len().max(1));
    if threads == 1 {
        return sources.iter().map(|s| search.translate(model, s)).collect();
    }
    let chunk = sources.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| search.translate(model, s)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(sources.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::contract("translation worker panicked"))??);
        }
        Ok(out)
    })
}
