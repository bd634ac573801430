use std::collections::HashMap;
use std::hash::Hash;

use crate::error::{Error, Result};

/// Highest n-gram order in the score.
pub const MAX_ORDER: usize = 4;

/// Sufficient statistics of corpus BLEU.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matched: [usize; MAX_ORDER],
    pub total: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add<T: Eq + Hash>(&mut self, hyp: &[T], reference: &[T]) {
        self.hyp_len += hyp.len();
        self.ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            if hyp.len() < n {
                continue;
            }
            let mut counts: HashMap<&[T], usize> = HashMap::new();
            for g in reference.windows(n) {
                *counts.entry(g).or_default() += 1;
            }
            for g in hyp.windows(n) {
                if let Some(c) = counts.get_mut(g) {
                    if *c > 0 {
                        *c -= 1;
                        self.matched[n - 1] += 1;
                    }
                }
            }
            self.total[n - 1] += hyp.len() + 1 - n;
        }
    }

    /// BLEU on a 0 to 100 scale, unsmoothed.
    pub fn score(&self) -> f64 {
        if self.matched.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = self
            .matched
            .iter()
            .zip(&self.total)
            .map(|(&m, &t)| (m as f64 / t as f64).ln())
            .sum::<f64>()
            / MAX_ORDER as f64;
        let bp = if self.hyp_len >= self.ref_len {
            0.0
        } else {
            1.0 - self.ref_len as f64 / self.hyp_len as f64
        };
        100.0 * (log_p + bp).exp()
    }
}

/// Corpus-level BLEU-4 with one reference per hypothesis: clipped n-gram
/// precisions for n = 1..4, geometric mean, brevity penalty over the corpus.
pub fn bleu<T: Eq + Hash>(hypotheses: &[impl AsRef<[T]>], references: &[impl AsRef<[T]>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::contract("bleu needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::contract(format!(
            "bleu got {} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut stats = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        stats.add(h.as_ref(), r.as_ref());
    }
    Ok(stats.score())
}

/// BLEU over whitespace-tokenised, case-sensitive lines.
pub fn bleu_text(hypotheses: &[impl AsRef<str>], references: &[impl AsRef<str>]) -> Result<f64> {
    let hyps: Vec<Vec<&str>> = hypotheses.iter().map(|l| l.as_ref().split_whitespace().collect()).collect();
    let refs: Vec<Vec<&str>> = references.iter().map(|l| l.as_ref().split_whitespace().collect()).collect();
    bleu(&hyps, &refs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpus_scores_100() {
        let s = vec!["the cat sat on the mat", "a b c d e"];
        assert!((bleu_text(&s, &s).unwrap() - 100.0).abs() < 1e-9);
    }

    #[test]
    fn no_four_gram_match_scores_zero() {
        let h = vec!["a b c d"];
        let r = vec!["a b c e"];
        assert_eq!(bleu_text(&h, &r).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_value() {
        // 5 of 6 unigrams, 3/5 bigrams, 2/4 trigrams, 1/3 4-grams, no length penalty.
        let h = vec!["a b c d x f"];
        let r = vec!["a b c d e f"];
        let want = 100.0 * ((5.0 / 6.0) * (3.0 / 5.0) * (2.0 / 4.0) * (1.0 / 3.0) as f64).powf(0.25);
        assert!((bleu_text(&h, &r).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn clipping_and_brevity() {
        // Repeated "a" is clipped to its reference count.
        let mut s = BleuStats::default();
        s.add(&["a", "a", "a"], &["a", "b", "c", "d"]);
        assert_eq!(s.matched[0], 1);
        assert_eq!(s.total[0], 3);
        assert_eq!((s.hyp_len, s.ref_len), (3, 4));
    }

    #[test]
    fn contract_errors() {
        let e: Vec<&str> = vec![];
        assert!(bleu_text(&e, &e).is_err());
        assert!(bleu_text(&["a"], &["a", "b"]).is_err());
    }
}
