use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batching::batch_by_length;
use super::checkpoint::{average_checkpoints, Checkpoint, VERSION};
use super::corpus::Pair;
use super::optim::{Adam, AdamConfig};
use crate::error::{Error, Result};
use crate::model::{Batch, ModelConfig, Seq2Seq};
use crate::nn::Dropout;
use crate::tensor::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub steps: usize,
    /// Padded tokens per batch.
    pub max_tokens: usize,
    pub checkpoint_every: usize,
    /// Checkpoints averaged into the final model.
    pub average_last: usize,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            steps: 10_000,
            max_tokens: 4096,
            checkpoint_every: 1000,
            average_last: 5,
            log_every: 100,
            seed: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl TrainConfig {
    /// A tiny model for smoke runs and quick tests: width 8, two capsules,
    /// one layer each side, no dropout, short warmup. Vocabulary sizes are
    /// left for the caller.
    pub fn micro() -> Self {
        let mut c = Self {
            adam: AdamConfig { lr_peak: 1e-2, warmup: 100, ..AdamConfig::default() },
            steps: 500,
            max_tokens: 256,
            checkpoint_every: 100,
            log_every: 50,
            ..Self::default()
        };
        c.model.embed_dim = 8;
        c.model.hidden_dim = 8;
        c.model.capsule.dim = 16;
        c.model.capsule.capsules = 2;
        c.model.encoder_layers = 1;
        c.model.decoder_layers = 1;
        c.model.dropout = 0.0;
        c
    }

    const KEYS: &'static [&'static str] = &[
        "steps",
        "max_tokens",
        "lr",
        "warmup",
        "beta1",
        "beta2",
        "adam_eps",
        "clip_norm",
        "checkpoint_every",
        "average_last",
        "log_every",
        "seed",
    ];

    /// Sets a training or model setting; `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = parse(key, value)?,
            "max_tokens" => self.max_tokens = parse(key, value)?,
            "lr" => self.adam.lr_peak = parse(key, value)?,
            "warmup" => self.adam.warmup = parse(key, value)?,
            "beta1" => self.adam.beta1 = parse(key, value)?,
            "beta2" => self.adam.beta2 = parse(key, value)?,
            "adam_eps" => self.adam.eps = parse(key, value)?,
            "clip_norm" => self.adam.clip_norm = parse(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "average_last" => self.average_last = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return self.model.set(key, value),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.adam;
        let values = [
            self.steps.to_string(),
            self.max_tokens.to_string(),
            a.lr_peak.to_string(),
            a.warmup.to_string(),
            a.beta1.to_string(),
            a.beta2.to_string(),
            a.eps.to_string(),
            a.clip_norm.to_string(),
            self.checkpoint_every.to_string(),
            self.average_last.to_string(),
            self.log_every.to_string(),
            self.seed.to_string(),
        ];
        let mut out: Vec<_> = Self::KEYS.iter().copied().zip(values).collect();
        out.extend(self.model.entries());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adam.validate()?;
        for (name, v) in [
            ("max_tokens", self.max_tokens),
            ("checkpoint_every", self.checkpoint_every),
            ("average_last", self.average_last),
            ("log_every", self.log_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_step: usize,
    pub checkpoints: Vec<PathBuf>,
    /// Average of the last checkpoints.
    pub averaged: PathBuf,
    pub last_log: Option<StepMetrics>,
}

/// Single-threaded optimisation loop over a fixed set of pairs.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Seq2Seq<f32>,
    optimizer: Adam<f32>,
    pairs: Vec<Pair>,
    batches: Vec<Vec<usize>>,
    queue: Vec<usize>,
    shuffle: ChaCha8Rng,
    dropout: Dropout,
}

impl Trainer {
    pub fn new(config: TrainConfig, pairs: Vec<Pair>) -> Result<Self> {
        config.validate()?;
        let model = Seq2Seq::init(config.model.clone(), config.seed)?;
        Self::with_model(config, model, pairs)
    }

    pub fn with_model(config: TrainConfig, model: Seq2Seq<f32>, pairs: Vec<Pair>) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::contract("no training pairs"));
        }
        let batches = batch_by_length(&pairs, config.max_tokens)?;
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle.set_stream(1);
        let dropout = Dropout::new(config.model.dropout, config.seed.wrapping_add(0x9e37_79b9));
        let optimizer = Adam::new(config.adam.clone(), &model.params);
        Ok(Self { config, model, optimizer, pairs, batches, queue: Vec::new(), shuffle, dropout })
    }

    pub fn step_count(&self) -> usize {
        self.optimizer.step_count()
    }

    /// Takes parameters and step from a checkpoint; optimizer moments restart.
    pub fn resume(&mut self, ck: &Checkpoint) -> Result<()> {
        self.model = Seq2Seq::with_params(self.config.model.clone(), ck.params.clone())?;
        self.optimizer = Adam::new(self.config.adam.clone(), &self.model.params);
        self.optimizer.set_step(ck.step);
        Ok(())
    }

    fn next_batch(&mut self) -> Result<Batch> {
        if self.queue.is_empty() {
            self.queue = (0..self.batches.len()).rev().collect();
            self.queue.shuffle(&mut self.shuffle);
        }
        let b = self.queue.pop().expect("non-empty queue");
        let pairs: Vec<&Pair> = self.batches[b].iter().map(|&i| &self.pairs[i]).collect();
        let pairs: Vec<(&[usize], &[usize])> = pairs.iter().map(|(s, t)| (s.as_slice(), t.as_slice())).collect();
        Batch::from_pairs(&pairs)
    }

    /// One optimisation step on the next batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = self.next_batch()?;
        let step = self.step_count() + 1;
        let g = Graph::recording();
        let p = self.model.params.bind(&g);
        let dropout = (self.config.model.dropout > 0.0).then_some(&mut self.dropout);
        let out = self.model.forward_train(&p, &batch, dropout)?;
        let loss = out.loss.value().item()? as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss.to_string() });
        }
        g.backward(out.loss)?;
        let grads = p.grads();
        drop(p);
        let stats = self.optimizer.update(&mut self.model.params, &grads)?;
        Ok(StepMetrics {
            step,
            loss,
            token_acc: out.correct as f64 / out.tokens.max(1) as f64,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: VERSION,
            params: self.model.params.clone(),
            step: self.step_count(),
            config: self.config.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }

    /// Trains up to `config.steps`, writing `metrics.log`, periodic
    /// `ckpt-<step>.caps` files and the averaged `model.caps` into `out`.
    pub fn run(&mut self, out: &Path) -> Result<TrainSummary> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let log_path = out.join("metrics.log");
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut checkpoints = Vec::new();
        let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0usize);
        let mut last_log = None;
        while self.step_count() < self.config.steps {
            let m = self.train_step()?;
            loss_sum += m.loss;
            acc_sum += m.token_acc;
            n += 1;
            if m.step % self.config.log_every == 0 || m.step == self.config.steps {
                let line = StepMetrics { loss: loss_sum / n as f64, token_acc: acc_sum / n as f64, ..m };
                writeln!(log, "{}\t{:.6}\t{:.6}\t{:.6e}", line.step, line.loss, line.token_acc, line.lr)
                    .and_then(|_| log.flush())
                    .map_err(|e| Error::io(&log_path, e))?;
                last_log = Some(line);
                (loss_sum, acc_sum, n) = (0.0, 0.0, 0);
            }
            if m.step % self.config.checkpoint_every == 0 || m.step == self.config.steps {
                let path = out.join(format!("ckpt-{:08}.caps", m.step));
                self.checkpoint().save(&path)?;
                checkpoints.push(path);
            }
        }
        if checkpoints.is_empty() {
            let path = out.join(format!("ckpt-{:08}.caps", self.step_count()));
            self.checkpoint().save(&path)?;
            checkpoints.push(path);
        }
        let keep = checkpoints.len().saturating_sub(self.config.average_last);
        let averaged = out.join("model.caps");
        average_checkpoints(&checkpoints[keep..])?.save(&averaged)?;
        Ok(TrainSummary { final_step: self.step_count(), checkpoints, averaged, last_log })
    }
}

/// Mean smoothed loss per target token and token accuracy over `pairs`.
pub fn evaluate(model: &Seq2Seq<f32>, pairs: &[Pair], max_tokens: usize) -> Result<(f64, f64)> {
    let batches = batch_by_length(pairs, max_tokens)?;
    let (mut loss, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    for b in batches {
        let chunk: Vec<(&[usize], &[usize])> = b.iter().map(|&i| (pairs[i].0.as_slice(), pairs[i].1.as_slice())).collect();
        let batch = Batch::from_pairs(&chunk)?;
        let g = Graph::eval();
        let p = model.params.bind(&g);
        let out = model.forward_train(&p, &batch, None)?;
        loss += out.loss.value().item()? as f64 * out.tokens as f64;
        correct += out.correct;
        tokens += out.tokens;
    }
    let t = tokens.max(1) as f64;
    Ok((loss / t, correct as f64 / t))
}
