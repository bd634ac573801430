use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use capsroute::model::{Seq2Seq, EOS};
use capsroute::nn::ParamSet;
use capsroute::train::*;
use capsroute::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn copy_spec(samples: usize, seed: u64) -> ToyTaskSpec {
    ToyTaskSpec { kind: TaskKind::Copy, vocab_size: 6, min_len: 2, max_len: 4, samples, seed }
}

fn micro_config(vocab: usize, steps: usize) -> TrainConfig {
    let mut c = TrainConfig::micro();
    c.model.src_vocab = vocab;
    c.model.tgt_vocab = vocab;
    c.steps = steps;
    c
}

#[test]
fn corpus_generation_is_pure() {
    let dir = tempfile::tempdir().unwrap();
    for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::Cipher] {
        let spec = ToyTaskSpec { kind, vocab_size: 12, min_len: 1, max_len: 9, samples: 300, seed: 41 };
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.pairs, b.pairs);
        write_corpus(dir.path(), "a", &a.vocab, &a.pairs).unwrap();
        write_corpus(dir.path(), "b", &b.vocab, &b.pairs).unwrap();
        for ext in ["src", "tgt"] {
            let x = fs::read(dir.path().join(format!("a.{ext}"))).unwrap();
            let y = fs::read(dir.path().join(format!("b.{ext}"))).unwrap();
            assert_eq!(x, y);
        }
        let other = generate_corpus(&ToyTaskSpec { seed: 42, ..spec.clone() }).unwrap();
        assert_ne!(a.pairs, other.pairs);
    }
}

#[test]
fn corpus_files_round_trip_through_the_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let spec = ToyTaskSpec { kind: TaskKind::Cipher, vocab_size: 30, min_len: 1, max_len: 6, samples: 50, seed: 3 };
    let c = generate_corpus(&spec).unwrap();
    write_corpus(dir.path(), "train", &c.vocab, &c.pairs).unwrap();
    let text = read_corpus(dir.path(), "train").unwrap();
    assert_eq!(to_ids(&c.vocab, &text), c.pairs);
    let perm = c.permutation.unwrap();
    for (s, t) in &c.pairs {
        assert_eq!(t, &s.iter().map(|&k| perm[k]).collect::<Vec<_>>());
    }
}

#[test]
fn same_seed_gives_identical_metric_logs() {
    let corpus = generate_corpus(&copy_spec(200, 5)).unwrap();
    let v = corpus.vocab.len();
    let mut logs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = micro_config(v, 60);
        cfg.log_every = 10;
        cfg.checkpoint_every = 20;
        cfg.model.dropout = 0.2;
        let summary = Trainer::new(cfg, corpus.pairs.clone()).unwrap().run(dir.path()).unwrap();
        assert_eq!(summary.final_step, 60);
        assert_eq!(summary.checkpoints.len(), 3);
        logs.push(fs::read_to_string(dir.path().join("metrics.log")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    let lines: Vec<&str> = logs[0].lines().collect();
    assert_eq!(lines.len(), 6);
    for (k, line) in lines.iter().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        assert_eq!(fields.len(), 4);
        assert_eq!(fields[0].parse::<usize>().unwrap(), 10 * (k + 1));
        for f in &fields[1..] {
            assert!(f.parse::<f64>().unwrap().is_finite());
        }
    }
}

#[test]
fn reloaded_checkpoint_gives_the_in_memory_loss() {
    let corpus = generate_corpus(&copy_spec(100, 6)).unwrap();
    let cfg = micro_config(corpus.vocab.len(), 30);
    let mut tr = Trainer::new(cfg.clone(), corpus.pairs.clone()).unwrap();
    for _ in 0..30 {
        tr.train_step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.caps");
    tr.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.step, 30);
    assert!(ck.params.bit_eq(&tr.model.params));

    let mut resumed = Trainer::new(cfg, corpus.pairs.clone()).unwrap();
    resumed.resume(&ck).unwrap();
    assert_eq!(resumed.step_count(), 30);
    let a = evaluate(&tr.model, &corpus.pairs, 256).unwrap();
    let b = evaluate(&resumed.model, &corpus.pairs, 256).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1.to_bits(), b.1.to_bits());
}

#[test]
fn checkpoint_bytes_survive_save_load_save() {
    let corpus = generate_corpus(&copy_spec(20, 8)).unwrap();
    let model = Seq2Seq::<f32>::init(micro_config(corpus.vocab.len(), 1).model, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.caps");
    let b = dir.path().join("b.caps");
    let ck = Checkpoint { version: VERSION, params: model.params.clone(), step: 17, config: vec![] };
    ck.save(&a).unwrap();
    Checkpoint::load(&a).unwrap().save(&b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(meta_path(&a)).unwrap(), fs::read(meta_path(&b)).unwrap());
}

fn random_params(seed: u64) -> ParamSet<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamSet::new();
    ps.insert("w", Tensor::uniform(vec![7, 5], -3.0, 3.0, &mut rng)).unwrap();
    ps.insert("b", Tensor::uniform(vec![5], -3.0, 3.0, &mut rng)).unwrap();
    ps
}

#[test]
fn averaging_matches_a_scalar_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let sets: Vec<ParamSet<f32>> = (0..3).map(|s| random_params(100 + s)).collect();
    let paths: Vec<PathBuf> = sets
        .iter()
        .enumerate()
        .map(|(i, ps)| {
            let p = dir.path().join(format!("{i}.caps"));
            Checkpoint { version: VERSION, params: ps.clone(), step: 10 * (i + 1), config: vec![] }.save(&p).unwrap();
            p
        })
        .collect();
    let avg = average_checkpoints(&paths).unwrap();
    assert_eq!(avg.step, 30);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let (i, j) = (rng.gen_range(0..7), rng.gen_range(0..5));
        let want: f64 = sets.iter().map(|s| s.by_name("w").unwrap().get(&[i, j]).unwrap() as f64).sum::<f64>() / 3.0;
        let got = avg.params.by_name("w").unwrap().get(&[i, j]).unwrap() as f64;
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }

    let single = average_checkpoints(&paths[..1]).unwrap();
    assert!(single.params.bit_eq(&sets[0]));

    let mut neg = ParamSet::new();
    for (_, name, t) in sets[0].iter() {
        neg.insert(name, t.map(|x| -x)).unwrap();
    }
    let np = dir.path().join("neg.caps");
    Checkpoint { version: VERSION, params: neg, step: 1, config: vec![] }.save(&np).unwrap();
    let zero = average_checkpoints(&[paths[0].clone(), np]).unwrap();
    assert!(zero.params.iter().all(|(_, _, t)| t.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn averaging_names_the_mismatched_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.caps");
    let b = dir.path().join("b.caps");
    Checkpoint { version: VERSION, params: random_params(1), step: 1, config: vec![] }.save(&a).unwrap();
    let mut other = ParamSet::new();
    other.insert("w", Tensor::zeros(vec![7, 5])).unwrap();
    other.insert("b", Tensor::zeros(vec![6])).unwrap();
    Checkpoint { version: VERSION, params: other, step: 1, config: vec![] }.save(&b).unwrap();
    let err = average_checkpoints(&[a, b]).unwrap_err().to_string();
    assert!(err.contains("tensor b"), "{err}");
    assert!(average_checkpoints(&[]).is_err());
}

#[test]
fn nan_loss_aborts_naming_the_step() {
    let corpus = generate_corpus(&copy_spec(20, 9)).unwrap();
    let cfg = micro_config(corpus.vocab.len(), 5);
    let mut model = Seq2Seq::<f32>::init(cfg.model.clone(), 1).unwrap();
    let id = model.params.id_of("output_proj").unwrap();
    let shape = model.params.get(id).shape().to_vec();
    model.params.set(id, Tensor::full(shape, f32::NAN)).unwrap();
    let mut tr = Trainer::with_model(cfg, model, corpus.pairs).unwrap();
    match tr.train_step() {
        Err(e @ Error::NonFiniteLoss { step: 1, .. }) => assert!(e.to_string().contains("step 1")),
        other => panic!("expected a non-finite loss error, got {other:?}"),
    }
}

#[test]
fn micro_config_halves_copy_loss_within_500_steps() {
    let spec = ToyTaskSpec { kind: TaskKind::Copy, vocab_size: 5, min_len: 3, max_len: 3, samples: 500, seed: 1 };
    let corpus = generate_corpus(&spec).unwrap();
    let cfg = micro_config(corpus.vocab.len(), 500);
    let mut tr = Trainer::new(cfg, corpus.pairs.clone()).unwrap();
    let (before, _) = evaluate(&tr.model, &corpus.pairs, 256).unwrap();
    for _ in 0..500 {
        tr.train_step().unwrap();
    }
    let (after, _) = evaluate(&tr.model, &corpus.pairs, 256).unwrap();
    assert!(after <= 0.5 * before, "loss {before:.4} -> {after:.4}");
}

fn multiset(pairs: &[Pair]) -> BTreeMap<Pair, usize> {
    let mut m = BTreeMap::new();
    for p in pairs {
        *m.entry(p.clone()).or_insert(0) += 1;
    }
    m
}

#[test]
fn batching_boundaries() {
    let same: Vec<Pair> = (0..10).map(|i| (vec![4 + i % 3; 5], vec![4; 5])).collect();
    for b in batch_by_length(&same, 40).unwrap() {
        assert_eq!(padded_tokens(&same, &b), b.iter().map(|&i| pair_tokens(&same[i])).sum::<usize>());
    }
    let mixed: Vec<Pair> = vec![(vec![4; 3], vec![4; 2]), (vec![4; 6], vec![4; 6]), (vec![4; 1], vec![4; 1])];
    let single = batch_by_length(&same, 10).unwrap();
    assert_eq!(single.len(), same.len());
    assert!(single.iter().all(|b| b.len() == 1));
    assert!(batch_by_length(&mixed, 11).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batches_respect_the_ceiling_and_keep_every_pair(
        seed in 0u64..10_000,
        n in 1usize..120,
        extra in 0usize..60,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<Pair> = (0..n)
            .map(|_| {
                let s: Vec<usize> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(4..20)).collect();
                let t: Vec<usize> = (0..rng.gen_range(1..15)).map(|_| rng.gen_range(4..20)).collect();
                (s, t)
            })
            .collect();
        let longest = pairs.iter().map(pair_tokens).max().unwrap();
        let ceiling = longest + extra;
        let batches = batch_by_length(&pairs, ceiling).unwrap();
        let mut seen = Vec::new();
        for b in &batches {
            prop_assert!(!b.is_empty());
            prop_assert!(padded_tokens(&pairs, b) <= ceiling);
            seen.extend(b.iter().map(|&i| pairs[i].clone()));
        }
        prop_assert_eq!(multiset(&seen), multiset(&pairs));
    }

    #[test]
    fn toy_targets_follow_the_task(seed in 0u64..1000, kind in 0usize..3) {
        let kind = [TaskKind::Copy, TaskKind::Reverse, TaskKind::Cipher][kind];
        let spec = ToyTaskSpec { kind, vocab_size: 9, min_len: 1, max_len: 7, samples: 20, seed };
        let c = generate_corpus(&spec).unwrap();
        for (s, t) in &c.pairs {
            prop_assert!((1..=7).contains(&s.len()));
            prop_assert!(s.iter().all(|&k| k > 3 && k < c.vocab.len()));
            let want: Vec<usize> = match kind {
                TaskKind::Copy => s.clone(),
                TaskKind::Reverse => s.iter().rev().copied().collect(),
                TaskKind::Cipher => s.iter().map(|&k| c.permutation.as_ref().unwrap()[k]).collect(),
            };
            prop_assert_eq!(t, &want);
            prop_assert!(!t.contains(&EOS));
        }
    }
}
