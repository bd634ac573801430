//! Decoding, scoring and measurement of trained models.

mod bench;
mod bleu;
mod routing;
mod search;

pub use bench::{fit_slope, latency_bench, time_one, BenchConfig, BenchReport, LatencyRecord};
pub use bleu::{bleu, bleu_text, BleuStats, MAX_ORDER};
pub use routing::{inspect_routing, sharpness};
pub use search::{
    argmax, beam_search, beam_search_with, greedy_decode, greedy_search, length_penalty, log_softmax_rows,
    translate_all, BeamHypothesis, ModelScorer, SearchConfig, StepScorer,
};
