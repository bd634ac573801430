use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD, UNK};

pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Bijection between tokens and ids; ids 0..4 are the reserved tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.add(t);
        }
        v
    }

    /// Vocabulary of the reserved tokens followed by `tokens` in first-seen order.
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self::new();
        for t in tokens {
            v.add(t);
        }
        v
    }

    /// Id of `token`, inserting it if new.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or the unknown id.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Space-joined tokens, dropping padding and `<s>` and stopping at `</s>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Format {
                what: "vocabulary",
                detail: format!("{} must start with {}", path.display(), RESERVED.join(", ")),
            });
        }
        let mut v = Self::new();
        for (n, line) in lines.iter().enumerate().skip(RESERVED.len()) {
            let t = line.trim();
            if t.is_empty() || t.contains(char::is_whitespace) || v.index.contains_key(t) {
                return Err(Error::Format {
                    what: "vocabulary",
                    detail: format!("{}:{}: bad or duplicate token {line:?}", path.display(), n + 1),
                });
            }
            v.add(t);
        }
        Ok(v)
    }
}
