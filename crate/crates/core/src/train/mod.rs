//! Synthetic corpora, batching, optimisation and checkpoints.

mod batching;
mod checkpoint;
mod corpus;
mod optim;
mod trainer;
mod vocab;

pub use batching::{batch_by_length, padded_tokens, pair_tokens};
pub use checkpoint::{average_checkpoints, decode_params, encode_params, meta_path, Checkpoint, MAGIC, VERSION};
pub use corpus::{generate_corpus, read_corpus, to_ids, toy_token, write_corpus, Pair, TaskKind, ToyCorpus, ToyTaskSpec};
pub use optim::{Adam, AdamConfig, UpdateStats};
pub use trainer::{evaluate, StepMetrics, TrainConfig, TrainSummary, Trainer};
pub use vocab::{Vocabulary, RESERVED};
