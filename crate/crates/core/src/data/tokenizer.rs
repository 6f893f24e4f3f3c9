use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Character-level vocabulary: pad, bos, then the alphabet sorted by codepoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<char>", into = "Vec<char>")]
pub struct Tokenizer {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl Tokenizer {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    const OFFSET: usize = 2;

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for t in texts {
            set.extend(t.chars());
        }
        Self::from(set.into_iter().collect::<Vec<_>>())
    }

    pub fn vocab_size(&self) -> usize {
        self.chars.len() + Self::OFFSET
    }

    pub fn alphabet(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .map(|i| i + Self::OFFSET)
                    .ok_or_else(|| Error::Data(format!("character {:?} is not in the vocabulary", c)))
            })
            .collect()
    }

    /// `[BOS] ++ encode(text)`
    pub fn encode_doc(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![Self::BOS];
        ids.extend(self.encode(text)?);
        Ok(ids)
    }

    /// Inverse of [`encode`](Self::encode); pad and bos are skipped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .filter(|&&i| i >= Self::OFFSET)
            .map(|&i| {
                self.chars
                    .get(i - Self::OFFSET)
                    .copied()
                    .ok_or(Error::TokenOutOfRange {
                        id: i,
                        vocab: self.vocab_size(),
                    })
            })
            .collect()
    }
}

impl From<Vec<char>> for Tokenizer {
    fn from(mut chars: Vec<char>) -> Self {
        chars.sort_unstable();
        chars.dedup();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Tokenizer { chars, index }
    }
}

impl From<Tokenizer> for Vec<char> {
    fn from(t: Tokenizer) -> Self {
        t.chars
    }
}
