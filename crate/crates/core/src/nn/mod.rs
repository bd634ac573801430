//! Recurrent layers, normalisation and positional encodings.

mod lstm;
mod norm;
mod params;
mod positional;

pub use lstm::{bilstm_encode, lstm_cell, BiLstmLayer, BiLstmStack, LstmParams};
pub use norm::{layer_norm, LayerNormParams};
pub use params::{Bound, ParamId, ParamSet};
pub(crate) use params::Init;
pub use positional::positional_encoding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Real, Var};

/// Inverted dropout with its own seeded stream.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn apply<'g, F: Real>(&mut self, x: Var<'g, F>) -> Result<Var<'g, F>> {
        x.dropout(self.rate, &mut self.rng)
    }
}
