use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::vocab::{Vocabulary, RESERVED};
use crate::error::{Error, Result};

pub type Pair = (Vec<usize>, Vec<usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Cipher,
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Self::Copy),
            "reverse" => Ok(Self::Reverse),
            "cipher" | "substitution-cipher" => Ok(Self::Cipher),
            _ => Err(Error::Config(format!("unknown task {s:?}, expected copy|reverse|cipher"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Copy => "copy",
            Self::Reverse => "reverse",
            Self::Cipher => "cipher",
        })
    }
}

/// Parameters of a synthetic parallel corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskSpec {
    pub kind: TaskKind,
    /// Content tokens, excluding the reserved ones.
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub samples: usize,
    pub seed: u64,
}

/// A generated corpus over a shared source/target vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCorpus {
    pub vocab: Vocabulary,
    pub pairs: Vec<Pair>,
    /// For the cipher task: `permutation[k]` is the target id of source id `k`.
    pub permutation: Option<Vec<usize>>,
}

/// Name of the `k`-th content token: `a..z`, then `aa, ab, …`.
pub fn toy_token(mut k: usize) -> String {
    let mut s = Vec::new();
    loop {
        s.push(b'a' + (k % 26) as u8);
        if k < 26 {
            break;
        }
        k = k / 26 - 1;
    }
    s.reverse();
    String::from_utf8(s).expect("ascii")
}

impl ToyTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::Config(format!("toy vocabulary needs at least 5 tokens, got {}", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(format!("invalid length range {}..={}", self.min_len, self.max_len)));
        }
        if self.samples == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let names: Vec<String> = (0..self.vocab_size).map(toy_token).collect();
        Vocabulary::from_tokens(names.iter().map(String::as_str))
    }

    /// The cipher permutation over ids, reserved ids mapped to themselves.
    fn permutation(&self) -> Vec<usize> {
        let base = RESERVED.len();
        let mut content: Vec<usize> = (base..base + self.vocab_size).collect();
        content.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        (0..base).chain(content).collect()
    }

    /// `samples` pairs drawn from sentence stream `stream`; streams give
    /// disjoint draws for train and held-out splits of the same task.
    pub fn generate_stream(&self, stream: u64, samples: usize) -> Result<ToyCorpus> {
        self.validate()?;
        let base = RESERVED.len();
        let permutation = (self.kind == TaskKind::Cipher).then(|| self.permutation());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let pairs = (0..samples)
            .map(|_| {
                let len = rng.gen_range(self.min_len..=self.max_len);
                let src: Vec<usize> = (0..len).map(|_| base + rng.gen_range(0..self.vocab_size)).collect();
                let tgt = match (self.kind, &permutation) {
                    (TaskKind::Copy, _) => src.clone(),
                    (TaskKind::Reverse, _) => src.iter().rev().copied().collect(),
                    (TaskKind::Cipher, Some(p)) => src.iter().map(|&t| p[t]).collect(),
                    (TaskKind::Cipher, None) => unreachable!(),
                };
                (src, tgt)
            })
            .collect();
        Ok(ToyCorpus { vocab: self.vocabulary(), pairs, permutation })
    }
}

/// Generates the corpus described by `spec`.
pub fn generate_corpus(spec: &ToyTaskSpec) -> Result<ToyCorpus> {
    spec.generate_stream(0, spec.samples)
}

fn corpus_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{name}.src")), dir.join(format!("{name}.tgt")))
}

/// Writes `<name>.src` and `<name>.tgt`, one sentence per line.
pub fn write_corpus(dir: &Path, name: &str, vocab: &Vocabulary, pairs: &[Pair]) -> Result<()> {
    let (sp, tp) = corpus_paths(dir, name);
    let mut src = String::new();
    let mut tgt = String::new();
    for (s, t) in pairs {
        src.push_str(&vocab.decode(s));
        src.push('\n');
        tgt.push_str(&vocab.decode(t));
        tgt.push('\n');
    }
    fs::write(&sp, src).map_err(|e| Error::io(&sp, e))?;
    fs::write(&tp, tgt).map_err(|e| Error::io(&tp, e))
}

/// Reads aligned `<name>.src` / `<name>.tgt` as whitespace-split lines.
pub fn read_corpus(dir: &Path, name: &str) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let (sp, tp) = corpus_paths(dir, name);
    let src = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
    let tgt = fs::read_to_string(&tp).map_err(|e| Error::io(&tp, e))?;
    let (src, tgt): (Vec<&str>, Vec<&str>) = (src.lines().collect(), tgt.lines().collect());
    if src.len() != tgt.len() {
        return Err(Error::Format {
            what: "corpus",
            detail: format!("{} has {} lines but {} has {}", sp.display(), src.len(), tp.display(), tgt.len()),
        });
    }
    let split = |l: &str| l.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    Ok(src.into_iter().zip(tgt).map(|(s, t)| (split(s), split(t))).collect())
}

/// Maps token sentences to ids, dropping pairs with an empty source.
pub fn to_ids(vocab: &Vocabulary, pairs: &[(Vec<String>, Vec<String>)]) -> Vec<Pair> {
    pairs
        .iter()
        .filter(|(s, _)| !s.is_empty())
        .map(|(s, t)| {
            (s.iter().map(|w| vocab.id(w)).collect(), t.iter().map(|w| vocab.id(w)).collect())
        })
        .collect()
}
