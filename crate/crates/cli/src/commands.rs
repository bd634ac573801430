use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use capsroute::infer::{bleu_text, inspect_routing, latency_bench, sharpness, translate_all, BenchConfig};
use capsroute::model::Seq2Seq;
use capsroute::train::{
    evaluate, read_corpus, to_ids, write_corpus, Checkpoint, Pair, TaskKind, ToyCorpus,
    TrainConfig, Trainer, Vocabulary,
};

use crate::config::RunConfig;
use crate::failure::{config_error, io_error};

/// Corpus splits written by `gen-data`, with their sentence streams.
const SPLITS: [(&str, u64); 3] = [("train", 0), ("valid", 1), ("test", 2)];

fn require<'a, T>(value: &'a Option<T>, key: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| config_error(format!("this command needs `{key}` to be set")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| io_error(path, e))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(text.lines().map(str::to_owned).collect())
}

/// Checks that every pair obeys the task rule.
fn check_pairs(kind: TaskKind, permutation: Option<&[usize]>, pairs: &[Pair]) -> Result<()> {
    for (n, (s, t)) in pairs.iter().enumerate() {
        let want: Vec<usize> = match kind {
            TaskKind::Copy => s.clone(),
            TaskKind::Reverse => s.iter().rev().copied().collect(),
            TaskKind::Cipher => {
                let p = permutation.ok_or_else(|| anyhow!("cipher corpus without a permutation"))?;
                s.iter().map(|&k| p[k]).collect()
            }
        };
        if t != &want {
            return Err(anyhow!("pair {} violates the {kind} rule", n + 1));
        }
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_resolved(out)?;
    let samples = [cfg.train_samples, cfg.valid_samples, cfg.test_samples];
    let spec = cfg.task_spec(cfg.train_samples);
    let mut vocab = None;
    let mut permutation = None;
    for ((name, stream), n) in SPLITS.into_iter().zip(samples) {
        if n == 0 {
            continue;
        }
        let corpus: ToyCorpus = spec.generate_stream(stream, n)?;
        write_corpus(out, name, &corpus.vocab, &corpus.pairs)?;
        // Self-check: the files read back to the same pairs, which obey the task.
        let back = to_ids(&corpus.vocab, &read_corpus(out, name)?);
        if back != corpus.pairs {
            return Err(anyhow!("{name} corpus did not read back identically"));
        }
        check_pairs(spec.kind, corpus.permutation.as_deref(), &back)?;
        println!("{name}: {} pairs", corpus.pairs.len());
        vocab = Some(corpus.vocab);
        permutation = corpus.permutation;
    }
    let vocab = vocab.unwrap_or_else(|| spec.vocabulary());
    vocab.save(&out.join("vocab.txt"))?;
    if let Some(perm) = permutation {
        let line: Vec<String> = perm.iter().map(usize::to_string).collect();
        write_text(&out.join("permutation.txt"), &(line.join(" ") + "\n"))?;
    }
    println!("self-check passed ({} task, vocabulary {})", spec.kind, vocab.len());
    Ok(())
}

fn load_split(dir: &Path, split: &str, vocab: &Vocabulary) -> Result<(Vec<Pair>, Vec<String>)> {
    let text = read_corpus(dir, split)?;
    let refs = text.iter().map(|(_, t)| t.join(" ")).collect();
    Ok((to_ids(vocab, &text), refs))
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<()> {
    let data = require(&cfg.data, "data")?;
    let vocab = Vocabulary::load(&data.join("vocab.txt"))?;
    let mut tc = cfg.train.clone();
    for (key, size) in [("src_vocab", &mut tc.model.src_vocab), ("tgt_vocab", &mut tc.model.tgt_vocab)] {
        if *size == 0 {
            *size = vocab.len();
        } else if *size != vocab.len() {
            return Err(config_error(format!("{key} = {size} but the vocabulary has {} entries", vocab.len())));
        }
    }
    tc.validate().map_err(|e| config_error(e.to_string()))?;
    let resolved = RunConfig { train: tc.clone(), ..cfg.clone() };
    resolved.write_resolved(out)?;
    let (pairs, _) = load_split(data, "train", &vocab)?;
    vocab.save(&out.join("vocab.txt"))?;
    let mut trainer = Trainer::new(tc.clone(), pairs)?;
    let summary = trainer.run(out)?;
    if let Some(m) = &summary.last_log {
        println!("step {} loss {:.4} token_acc {:.4}", m.step, m.loss, m.token_acc);
    }
    if data.join("valid.src").exists() {
        let model = load_model(&summary.averaged)?;
        let (valid, _) = load_split(data, "valid", &vocab)?;
        let (loss, acc) = evaluate(&model, &valid, tc.max_tokens)?;
        println!("valid loss {loss:.4} token_acc {acc:.4}");
    }
    println!("model written to {}", summary.averaged.display());
    Ok(())
}

/// Rebuilds a model from a checkpoint and its configuration sidecar.
pub fn load_model(path: &Path) -> Result<Seq2Seq<f32>> {
    let ck = Checkpoint::load(path)?;
    if ck.config.is_empty() {
        return Err(config_error(format!("{} has no configuration sidecar", path.display())));
    }
    let mut tc = TrainConfig::default();
    for (k, v) in &ck.config {
        if !tc.set(k, v).map_err(|e| config_error(e.to_string()))? {
            return Err(config_error(format!("{}: unknown setting {k:?}", path.display())));
        }
    }
    Ok(Seq2Seq::with_params(tc.model, ck.params)?)
}

fn model_and_vocab(cfg: &RunConfig) -> Result<(Seq2Seq<f32>, Vocabulary)> {
    let model_path = require(&cfg.model, "model")?;
    let vocab_path = match &cfg.vocab {
        Some(v) => v.clone(),
        None => model_path.parent().unwrap_or(Path::new(".")).join("vocab.txt"),
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    let model = load_model(model_path)?;
    if model.config.src_vocab != vocab.len() || model.config.tgt_vocab != vocab.len() {
        return Err(config_error(format!(
            "{} has {} entries but the model expects {}/{}",
            vocab_path.display(),
            vocab.len(),
            model.config.src_vocab,
            model.config.tgt_vocab
        )));
    }
    Ok((model, vocab))
}

/// Translates sentences; empty lines stay empty.
fn translate_lines(cfg: &RunConfig, model: &Seq2Seq<f32>, vocab: &Vocabulary, lines: &[String]) -> Result<Vec<String>> {
    let ids: Vec<Vec<usize>> = lines.iter().map(|l| vocab.encode(l)).collect();
    let keep: Vec<usize> = (0..ids.len()).filter(|&i| !ids[i].is_empty()).collect();
    let sources: Vec<Vec<usize>> = keep.iter().map(|&i| ids[i].clone()).collect();
    let outputs = translate_all(model, &sources, cfg.search_config(), cfg.threads)?;
    let mut text = vec![String::new(); lines.len()];
    for (i, out) in keep.into_iter().zip(outputs) {
        text[i] = vocab.decode(&out);
    }
    Ok(text)
}

fn joined(lines: &[String]) -> String {
    lines.iter().map(|l| format!("{l}\n")).collect()
}

pub fn translate(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_resolved(out)?;
    let (model, vocab) = model_and_vocab(cfg)?;
    let lines = match (&cfg.input, &cfg.sentence) {
        (Some(p), _) => read_lines(p)?,
        (None, Some(s)) => vec![s.clone()],
        (None, None) => return Err(config_error("translate needs `input` or `sentence`")),
    };
    let text = translate_lines(cfg, &model, &vocab, &lines)?;
    let path = out.join("translations.txt");
    write_text(&path, &joined(&text))?;
    if lines.len() == 1 {
        println!("{}", text[0]);
    } else {
        println!("{} sentences written to {}", text.len(), path.display());
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_resolved(out)?;
    let (model, vocab) = model_and_vocab(cfg)?;
    let data = require(&cfg.data, "data")?;
    let (pairs, refs) = load_split(data, &cfg.split, &vocab)?;
    let sources: Vec<String> = read_corpus(data, &cfg.split)?.into_iter().map(|(s, _)| s.join(" ")).collect();
    let hyps = translate_lines(cfg, &model, &vocab, &sources)?;
    let bleu = bleu_text(&hyps, &refs)?;
    let exact = hyps.iter().zip(&refs).filter(|(h, r)| h == r).count();
    let seq_acc = exact as f64 / refs.len() as f64;
    let (loss, token_acc) = evaluate(&model, &pairs, cfg.train.max_tokens)?;
    write_text(&out.join("hypotheses.txt"), &joined(&hyps))?;
    let report = format!(
        "split = {}\nsentences = {}\nbleu = {bleu:.4}\nseq_acc = {seq_acc:.6}\nloss = {loss:.6}\ntoken_acc = {token_acc:.6}\n",
        cfg.split,
        refs.len()
    );
    write_text(&out.join("eval.txt"), &report)?;
    print!("{report}");
    Ok(())
}

pub fn bench(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_resolved(out)?;
    let model = match &cfg.model {
        Some(p) => load_model(p)?,
        None => {
            let m = &cfg.train.model;
            if m.src_vocab == 0 || m.tgt_vocab == 0 {
                return Err(config_error("bench without `model` needs src_vocab and tgt_vocab"));
            }
            m.validate().map_err(|e| config_error(e.to_string()))?;
            Seq2Seq::init(m.clone(), cfg.train.seed)?
        }
    };
    let longest = cfg.bench_lengths.iter().copied().max().unwrap_or(0);
    if longest > model.config.max_len {
        return Err(config_error(format!("bench length {longest} exceeds model max_len {}", model.config.max_len)));
    }
    let bc = BenchConfig {
        trials: cfg.bench_trials,
        warmup: cfg.bench_warmup,
        output_len: cfg.bench_output_len,
        seed: cfg.train.seed,
    };
    let report = latency_bench(&model, &cfg.bench_lengths, &bc)?;
    let path = out.join("bench.csv");
    write_with(&path, |w| report.write_csv(w))?;
    for (i, r) in report.records.iter().enumerate() {
        println!(
            "L={:<4} encode {:.3} ms  per-token {:.4} ms  total {:.3} ms",
            r.length, report.encode_ms[i], report.per_token_ms[i], report.total_ms[i]
        );
    }
    println!(
        "per-token slope {:.3e} ms/token, drift at longest length {:.2}% of mean per-token time",
        report.slope_ms,
        100.0 * report.relative_drift()
    );
    Ok(())
}

pub fn inspect(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_resolved(out)?;
    let (model, vocab) = model_and_vocab(cfg)?;
    let sentence = match (&cfg.sentence, &cfg.input) {
        (Some(s), _) => s.clone(),
        (None, Some(p)) => read_lines(p)?
            .into_iter()
            .find(|l| !l.trim().is_empty())
            .ok_or_else(|| config_error(format!("{} has no sentence", p.display())))?,
        (None, None) => return Err(config_error("inspect-routing needs `sentence` or `input`")),
    };
    let trace = inspect_routing(&model, &vocab.encode(&sentence)).context("routing inspection")?;
    write_with(&out.join("routing.csv"), |w| trace.write_csv(w))?;
    write_with(&out.join("routing_entropy.csv"), |w| trace.write_entropy_csv(w))?;
    for (t, e) in trace.entropy.iter().enumerate() {
        println!("iteration {} mean entropy {e:.4}", t + 1);
    }
    println!("final-iteration entries within 0.1 of 0 or 1: {:.1}%", 100.0 * sharpness(&trace, 0.1));
    Ok(())
}
