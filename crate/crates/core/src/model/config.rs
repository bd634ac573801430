use std::fmt;
use std::str::FromStr;

use crate::capsule::{CapsuleConfig, CouplingAxis, Scoring, Sharing};
use crate::error::{Error, Result};

/// How the encoder's per-token states are reduced to a fixed-size context.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Capsule,
    Pooling,
}

impl FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "capsule" => Ok(Self::Capsule),
            "pooling" => Ok(Self::Pooling),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}, expected capsule|pooling"))),
        }
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Capsule => "capsule",
            Self::Pooling => "pooling",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Routing settings; `capsule.dim` always equals `2·hidden_dim`.
    pub capsule: CapsuleConfig,
    pub aggregation: Aggregation,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            src_vocab: 0,
            tgt_vocab: 0,
            embed_dim: 512,
            hidden_dim: 512,
            encoder_layers: 4,
            decoder_layers: 3,
            capsule: CapsuleConfig { dim: 1024, ..Default::default() },
            aggregation: Aggregation::Capsule,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 256,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" | "yes" => Ok(true),
        "off" | "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value {value:?} for {key}, expected on|off"))),
    }
}

impl ModelConfig {
    pub const KEYS: &'static [&'static str] = &[
        "src_vocab",
        "tgt_vocab",
        "embed_dim",
        "hidden_dim",
        "encoder_layers",
        "decoder_layers",
        "capsules",
        "routing_iterations",
        "scoring",
        "sharing",
        "positional",
        "coupling_axis",
        "aggregation",
        "dropout",
        "label_smoothing",
        "max_len",
    ];

    /// Sets one field from its textual form. Returns `Ok(false)` when the key
    /// is not a model setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let value = value.trim();
        match key {
            "src_vocab" => self.src_vocab = parse(key, value)?,
            "tgt_vocab" => self.tgt_vocab = parse(key, value)?,
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => {
                self.hidden_dim = parse(key, value)?;
                self.capsule.dim = 2 * self.hidden_dim;
            }
            "encoder_layers" => self.encoder_layers = parse(key, value)?,
            "decoder_layers" => self.decoder_layers = parse(key, value)?,
            "capsules" => self.capsule.capsules = parse(key, value)?,
            "routing_iterations" => self.capsule.iterations = parse(key, value)?,
            "scoring" => self.capsule.scoring = value.parse::<Scoring>()?,
            "sharing" => self.capsule.sharing = value.parse::<Sharing>()?,
            "positional" => self.capsule.positional = parse_bool(key, value)?,
            "coupling_axis" => self.capsule.coupling_axis = value.parse::<CouplingAxis>()?,
            "aggregation" => self.aggregation = value.parse()?,
            "dropout" => self.dropout = parse(key, value)?,
            "label_smoothing" => self.label_smoothing = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every setting in `KEYS` order, in the form `set` accepts.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.capsule;
        let values = [
            self.src_vocab.to_string(),
            self.tgt_vocab.to_string(),
            self.embed_dim.to_string(),
            self.hidden_dim.to_string(),
            self.encoder_layers.to_string(),
            self.decoder_layers.to_string(),
            c.capsules.to_string(),
            c.iterations.to_string(),
            c.scoring.to_string(),
            c.sharing.to_string(),
            if c.positional { "on" } else { "off" }.to_string(),
            c.coupling_axis.to_string(),
            self.aggregation.to_string(),
            self.dropout.to_string(),
            self.label_smoothing.to_string(),
            self.max_len.to_string(),
        ];
        Self::KEYS.iter().copied().zip(values).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("src_vocab", self.src_vocab),
            ("tgt_vocab", self.tgt_vocab),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.capsule.dim != 2 * self.hidden_dim {
            return Err(Error::Config(format!(
                "capsule width {} must equal twice hidden_dim {}",
                self.capsule.dim, self.hidden_dim
            )));
        }
        if self.aggregation == Aggregation::Capsule {
            self.capsule.validate()?;
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        Ok(())
    }

    /// Rows of the fixed-size source context.
    pub fn context_rows(&self) -> usize {
        match self.aggregation {
            Aggregation::Capsule => self.capsule.capsules,
            Aggregation::Pooling => crate::capsule::POOLED_ROWS,
        }
    }
}
