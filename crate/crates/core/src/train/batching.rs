use super::corpus::Pair;
use crate::error::{Error, Result};

/// Tokens a pair occupies: source plus target length.
pub fn pair_tokens(pair: &Pair) -> usize {
    pair.0.len() + pair.1.len()
}

/// Groups pair indices into batches of similar source length whose padded
/// size `count × (longest source + longest target)` stays within `max_tokens`.
pub fn batch_by_length(pairs: &[Pair], max_tokens: usize) -> Result<Vec<Vec<usize>>> {
    if let Some((i, p)) = pairs.iter().enumerate().find(|(_, p)| pair_tokens(p) > max_tokens) {
        return Err(Error::contract(format!(
            "pair {i} has {} tokens, above the batch ceiling {max_tokens}",
            pair_tokens(p)
        )));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by_key(|&i| (pairs[i].0.len(), pairs[i].1.len(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let (mut max_src, mut max_tgt) = (0, 0);
    for i in order {
        let (s, t) = (pairs[i].0.len().max(max_src), pairs[i].1.len().max(max_tgt));
        if !current.is_empty() && (current.len() + 1) * (s + t) > max_tokens {
            batches.push(std::mem::take(&mut current));
            max_src = pairs[i].0.len();
            max_tgt = pairs[i].1.len();
        } else {
            max_src = s;
            max_tgt = t;
        }
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Padded token count of a batch.
pub fn padded_tokens(pairs: &[Pair], batch: &[usize]) -> usize {
    let s = batch.iter().map(|&i| pairs[i].0.len()).max().unwrap_or(0);
    let t = batch.iter().map(|&i| pairs[i].1.len()).max().unwrap_or(0);
    batch.len() * (s + t)
}
