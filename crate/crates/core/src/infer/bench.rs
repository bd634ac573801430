use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Seq2Seq, BOS, UNK};
use crate::tensor::Real;

/// Timing of one source length, in nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyRecord {
    pub length: usize,
    pub encode_ns: u64,
    /// Time of each decoder step.
    pub step_ns: Vec<u64>,
    pub total_ns: u64,
}

impl LatencyRecord {
    pub fn encode_ms(&self) -> f64 {
        self.encode_ns as f64 / 1e6
    }

    /// Mean time of one decoder step.
    pub fn per_token_ms(&self) -> f64 {
        self.step_ns.iter().sum::<u64>() as f64 / self.step_ns.len().max(1) as f64 / 1e6
    }

    pub fn total_ms(&self) -> f64 {
        self.total_ns as f64 / 1e6
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchConfig {
    pub trials: usize,
    /// Untimed runs per length before measuring.
    pub warmup: usize,
    /// Decoder steps per trial; decoding never stops early.
    pub output_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { trials: 30, warmup: 3, output_len: 20, seed: 1 }
    }
}

/// Per-length medians plus the least-squares fit of per-token time on length.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub records: Vec<LatencyRecord>,
    /// Per-length median of the per-token time, in ms.
    pub per_token_ms: Vec<f64>,
    pub encode_ms: Vec<f64>,
    pub total_ms: Vec<f64>,
    /// Fitted change in per-token ms per extra source token.
    pub slope_ms: f64,
    pub mean_per_token_ms: f64,
}

impl BenchReport {
    /// `|slope · max_len|` relative to the mean per-token time.
    pub fn relative_drift(&self) -> f64 {
        let lmax = self.records.iter().map(|r| r.length).max().unwrap_or(0) as f64;
        (self.slope_ms * lmax).abs() / self.mean_per_token_ms
    }

    /// Writes `length,encode_ms,per_token_ms,total_ms`, one row per length.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "length,encode_ms,per_token_ms,total_ms")?;
        for (i, r) in self.records.iter().enumerate() {
            writeln!(w, "{},{:.6},{:.6},{:.6}", r.length, self.encode_ms[i], self.per_token_ms[i], self.total_ms[i])?;
        }
        Ok(())
    }
}

/// Times encoding of a random source and `output_len` greedy decoder steps.
pub fn time_one<F: Real>(model: &Seq2Seq<F>, src: &[usize], output_len: usize) -> Result<LatencyRecord> {
    let start = Instant::now();
    let ctx = model.encode(src)?;
    let encode_ns = start.elapsed().as_nanos() as u64;
    let mut state = model.initial_state(1);
    let mut prev = BOS;
    let mut step_ns = Vec::with_capacity(output_len);
    for _ in 0..output_len {
        let t = Instant::now();
        let (logits, next) = model.decode_step(&ctx, &state, prev)?;
        let row = logits.data();
        prev = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        state = next;
        step_ns.push(t.elapsed().as_nanos() as u64);
    }
    let total_ns = start.elapsed().as_nanos() as u64;
    Ok(LatencyRecord { length: src.len(), encode_ns, step_ns, total_ns })
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Least-squares slope of `y` on `x`.
pub fn fit_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Runs `trials` timed decodes per source length on the calling thread.
///
/// Sources are random non-reserved tokens. Lengths are interleaved within
/// each trial round so slow drift in machine speed does not masquerade as a
/// length effect. The returned records hold one representative trial per
/// length (the one with the median total time).
pub fn latency_bench<F: Real>(model: &Seq2Seq<F>, lengths: &[usize], cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.trials < 10 {
        return Err(Error::contract(format!("latency bench needs at least 10 trials, got {}", cfg.trials)));
    }
    if lengths.is_empty() || cfg.output_len == 0 {
        return Err(Error::contract("latency bench needs lengths and a positive output length"));
    }
    let vocab = model.config.src_vocab;
    if vocab <= UNK + 1 {
        return Err(Error::contract("source vocabulary has no ordinary tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sample = |len: usize| -> Vec<usize> { (0..len).map(|_| rng.gen_range(UNK + 1..vocab)).collect() };
    for &len in lengths {
        for _ in 0..cfg.warmup {
            time_one(model, &sample(len), cfg.output_len)?;
        }
    }
    let mut runs: Vec<Vec<LatencyRecord>> = vec![Vec::with_capacity(cfg.trials); lengths.len()];
    for _ in 0..cfg.trials {
        for (k, &len) in lengths.iter().enumerate() {
            runs[k].push(time_one(model, &sample(len), cfg.output_len)?);
        }
    }
    let mut report = BenchReport {
        records: Vec::new(),
        per_token_ms: Vec::new(),
        encode_ms: Vec::new(),
        total_ms: Vec::new(),
        slope_ms: 0.0,
        mean_per_token_ms: 0.0,
    };
    for mut trials in runs {
        report.per_token_ms.push(median(trials.iter().map(LatencyRecord::per_token_ms).collect()));
        report.encode_ms.push(median(trials.iter().map(LatencyRecord::encode_ms).collect()));
        report.total_ms.push(median(trials.iter().map(LatencyRecord::total_ms).collect()));
        trials.sort_by_key(|r| r.total_ns);
        report.records.push(trials.swap_remove(trials.len() / 2));
    }
    let x: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
    report.slope_ms = fit_slope(&x, &report.per_token_ms);
    report.mean_per_token_ms = report.per_token_ms.iter().sum::<f64>() / lengths.len() as f64;
    Ok(report)
}
