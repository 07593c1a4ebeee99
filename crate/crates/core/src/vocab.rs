//! Word-level vocabulary feeding the encoder.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

pub const SPECIAL_TOKENS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;

/// Lowercasing word vocabulary. Ids `0..5` are the special tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Keeps words seen at least `min_count` times, most frequent first
    /// (ties alphabetical), up to `max_size` entries including specials.
    pub fn build<'a>(
        sentences: impl IntoIterator<Item = &'a [String]>,
        min_count: usize,
        max_size: usize,
    ) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in sentences {
            for t in s {
                let norm = normalize(t);
                if !SPECIAL_TOKENS.contains(&norm.as_str()) {
                    *counts.entry(norm).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            words
                .into_iter()
                .take(max_size.saturating_sub(SPECIAL_TOKENS.len()))
                .map(|(w, _)| w),
        );
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { tokens, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        self.index.get(&normalize(token)).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

fn normalize(token: &str) -> String {
    if SPECIAL_TOKENS.contains(&token) {
        token.to_string()
    } else {
        token.to_lowercase()
    }
}
