use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use capsroute::infer::SearchConfig;
use capsroute::train::{TaskKind, ToyTaskSpec, TrainConfig};

use crate::failure::{config_error, io_error};

/// Environment variable that overrides the configured seed.
pub const SEED_VAR: &str = "CAPSROUTE_SEED";

/// How `translate` chooses tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Greedy,
    Beam,
}

/// Every setting a command can read, flat and textual on the outside.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub task: TaskKind,
    pub task_vocab: usize,
    pub task_min_len: usize,
    pub task_max_len: usize,
    pub train_samples: usize,
    pub valid_samples: usize,
    pub test_samples: usize,
    pub search: SearchMode,
    pub beam: usize,
    pub length_penalty: f64,
    pub decode_max_len: usize,
    pub threads: usize,
    pub split: String,
    pub bench_lengths: Vec<usize>,
    pub bench_trials: usize,
    pub bench_warmup: usize,
    pub bench_output_len: usize,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub sentence: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let search = SearchConfig::default();
        Self {
            train,
            task: TaskKind::Copy,
            task_vocab: 20,
            task_min_len: 4,
            task_max_len: 12,
            train_samples: 20_000,
            valid_samples: 1000,
            test_samples: 1000,
            search: SearchMode::Beam,
            beam: search.beam,
            length_penalty: search.alpha,
            decode_max_len: 64,
            threads: 1,
            split: "valid".into(),
            bench_lengths: vec![10, 20, 50, 100, 200],
            bench_trials: 30,
            bench_warmup: 3,
            bench_output_len: 20,
            data: None,
            model: None,
            vocab: None,
            input: None,
            sentence: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_error(format!("invalid value {value:?} for {key}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    const KEYS: &'static [&'static str] = &[
        "task",
        "task_vocab",
        "task_min_len",
        "task_max_len",
        "train_samples",
        "valid_samples",
        "test_samples",
        "search",
        "beam",
        "length_penalty",
        "decode_max_len",
        "threads",
        "split",
        "bench_lengths",
        "bench_trials",
        "bench_warmup",
        "bench_output_len",
        "data",
        "model",
        "vocab",
        "input",
        "sentence",
    ];

    /// Applies one `key = value` setting; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "task" => self.task = value.parse().map_err(|e| config_error(format!("{e}")))?,
            "task_vocab" => self.task_vocab = parse(key, value)?,
            "task_min_len" => self.task_min_len = parse(key, value)?,
            "task_max_len" => self.task_max_len = parse(key, value)?,
            "train_samples" => self.train_samples = parse(key, value)?,
            "valid_samples" => self.valid_samples = parse(key, value)?,
            "test_samples" => self.test_samples = parse(key, value)?,
            "search" => {
                self.search = match value {
                    "greedy" => SearchMode::Greedy,
                    "beam" => SearchMode::Beam,
                    _ => return Err(config_error(format!("unknown search {value:?}, expected greedy|beam"))),
                }
            }
            "beam" => self.beam = parse(key, value)?,
            "length_penalty" => self.length_penalty = parse(key, value)?,
            "decode_max_len" => self.decode_max_len = parse(key, value)?,
            "threads" => self.threads = parse(key, value)?,
            "split" => self.split = value.to_string(),
            "bench_lengths" => {
                self.bench_lengths = value
                    .split(',')
                    .map(|v| parse(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "bench_trials" => self.bench_trials = parse(key, value)?,
            "bench_warmup" => self.bench_warmup = parse(key, value)?,
            "bench_output_len" => self.bench_output_len = parse(key, value)?,
            "data" => self.data = path(value),
            "model" => self.model = path(value),
            "vocab" => self.vocab = path(value),
            "input" => self.input = path(value),
            "sentence" => self.sentence = (!value.is_empty()).then(|| value.to_string()),
            _ => {
                let known = self.train.set(key, value).map_err(|e| config_error(e.to_string()))?;
                if !known {
                    return Err(config_error(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Applies a `key = value` file; `#` starts a comment.
    pub fn apply_file(&mut self, file: &Path) -> Result<()> {
        let text = fs::read_to_string(file).map_err(|e| io_error(file, e))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_error(format!("{}:{}: expected key = value", file.display(), n + 1)))?;
            self.set(k.trim(), v).with_context(|| format!("{}:{}", file.display(), n + 1))?;
        }
        Ok(())
    }

    /// Applies a `key=value` command-line override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_error(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Resolves defaults, then the file, then the seed variable, then flags.
    pub fn resolve(file: Option<&Path>, seed_var: Option<String>, overrides: &[String]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(f) = file {
            c.apply_file(f)?;
        }
        if let Some(seed) = seed_var {
            c.set("seed", &seed).with_context(|| format!("from {SEED_VAR}"))?;
        }
        for kv in overrides {
            c.apply_override(kv)?;
        }
        Ok(c)
    }

    pub fn task_spec(&self, samples: usize) -> ToyTaskSpec {
        ToyTaskSpec {
            kind: self.task,
            vocab_size: self.task_vocab,
            min_len: self.task_min_len,
            max_len: self.task_max_len,
            samples,
            seed: self.train.seed,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let beam = match self.search {
            SearchMode::Greedy => 1,
            SearchMode::Beam => self.beam,
        };
        SearchConfig { beam, alpha: self.length_penalty, max_len: self.decode_max_len }
    }

    /// Checks the settings shared by every command.
    pub fn validate(&self) -> Result<()> {
        self.task_spec(self.train_samples.max(1)).validate().map_err(|e| config_error(e.to_string()))?;
        self.train.adam.validate().map_err(|e| config_error(e.to_string()))?;
        if self.beam == 0 {
            return Err(config_error("beam must be at least 1"));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(config_error("length_penalty must be non-negative"));
        }
        if self.decode_max_len == 0 || self.threads == 0 {
            return Err(config_error("decode_max_len and threads must be positive"));
        }
        if self.bench_trials < 10 {
            return Err(config_error("bench_trials must be at least 10"));
        }
        if self.bench_lengths.is_empty() || self.bench_lengths.contains(&0) || self.bench_output_len == 0 {
            return Err(config_error("bench lengths and bench_output_len must be positive"));
        }
        Ok(())
    }

    /// Every setting as `key = value` lines, in a fixed order.
    pub fn render(&self) -> String {
        let values = [
            self.task.to_string(),
            self.task_vocab.to_string(),
            self.task_min_len.to_string(),
            self.task_max_len.to_string(),
            self.train_samples.to_string(),
            self.valid_samples.to_string(),
            self.test_samples.to_string(),
            match self.search {
                SearchMode::Greedy => "greedy".into(),
                SearchMode::Beam => "beam".into(),
            },
            self.beam.to_string(),
            self.length_penalty.to_string(),
            self.decode_max_len.to_string(),
            self.threads.to_string(),
            self.split.clone(),
            self.bench_lengths.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            self.bench_trials.to_string(),
            self.bench_warmup.to_string(),
            self.bench_output_len.to_string(),
            show(&self.data),
            show(&self.model),
            show(&self.vocab),
            show(&self.input),
            self.sentence.clone().unwrap_or_default(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        for (k, v) in self.train.entries() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Writes `config.resolved` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let p = dir.join("config.resolved");
        fs::write(&p, self.render()).map_err(|e| io_error(&p, e))
    }
}
