//! Linear-time sequence-to-sequence translation with a capsule encoder.
//!
//! A BiLSTM reads the source sentence, dynamic routing by agreement
//! compresses its per-token states into a fixed number of capsules, and a
//! conditional LSTM decoder generates the target from a projection of those
//! capsules that is computed once per sentence. Decoding cost per target
//! token therefore does not depend on the source length.

pub mod capsule;
pub mod error;
pub mod infer;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Mode, Real, Tensor, Var};
