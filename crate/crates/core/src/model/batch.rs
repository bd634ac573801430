use super::{BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Padded id matrices for a batch of sentence pairs.
///
/// Decoder inputs are `<s> y…` and outputs `y… </s>`, both padded to the
/// longest target plus one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    /// `[size×src_len]`, row-major.
    pub src: Vec<usize>,
    pub src_lens: Vec<usize>,
    pub src_len: usize,
    pub tgt_in: Vec<usize>,
    pub tgt_out: Vec<usize>,
    pub tgt_len: usize,
}

impl Batch {
    pub fn from_pairs<S: AsRef<[usize]>, T: AsRef<[usize]>>(pairs: &[(S, T)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if pairs.iter().any(|(s, _)| s.as_ref().is_empty()) {
            return Err(Error::contract("empty source sentence in batch"));
        }
        let size = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.as_ref().len()).max().unwrap_or(0);
        let tgt_len = 1 + pairs.iter().map(|(_, t)| t.as_ref().len()).max().unwrap_or(0);
        let mut src = vec![PAD; size * src_len];
        let mut tgt_in = vec![PAD; size * tgt_len];
        let mut tgt_out = vec![PAD; size * tgt_len];
        let mut src_lens = Vec::with_capacity(size);
        for (b, (s, t)) in pairs.iter().enumerate() {
            let (s, t) = (s.as_ref(), t.as_ref());
            src[b * src_len..b * src_len + s.len()].copy_from_slice(s);
            src_lens.push(s.len());
            let row = b * tgt_len;
            tgt_in[row] = BOS;
            tgt_in[row + 1..row + 1 + t.len()].copy_from_slice(t);
            tgt_out[row..row + t.len()].copy_from_slice(t);
            tgt_out[row + t.len()] = EOS;
        }
        Ok(Self { size, src, src_lens, src_len, tgt_in, tgt_out, tgt_len })
    }

    /// Target positions that count towards the loss.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}
