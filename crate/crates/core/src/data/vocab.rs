//! Closed vocabulary, whitespace tokenizer and synonym groups.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[PAD as usize] != "<pad>" || words[UNK as usize] != "<unk>" {
            return Err(Error::Data("vocabulary must start with <pad>, <unk>".into()));
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word '{w}'")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Joins the words of the non-PAD ids.
    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&t| t != PAD)
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let words: Vec<String> = serde_json::from_str(s)?;
        Self::new(words)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.words)?)
    }
}

/// Whitespace split, per-word lookup (unknown → UNK), truncated or PAD-filled
/// to exactly `max_tokens`.
pub fn tokenize(raw_text: &str, vocab: &Vocab, max_tokens: usize) -> Vec<u32> {
    let mut ids: Vec<u32> = raw_text
        .split_whitespace()
        .take(max_tokens)
        .map(|w| vocab.id(w).unwrap_or(UNK))
        .collect();
    ids.resize(max_tokens, PAD);
    ids
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SynonymTable {
    pub groups: Vec<Vec<u32>>,
}

impl SynonymTable {
    pub fn new(groups: Vec<Vec<u32>>) -> Result<Self> {
        let t = Self { groups };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (g, members) in self.groups.iter().enumerate() {
            if members.len() < 2 {
                return Err(Error::Data(format!("synonym group {g} has fewer than 2 members")));
            }
            for &m in members {
                if let Some(prev) = seen.insert(m, g) {
                    return Err(Error::Data(format!(
                        "token {m} appears in synonym groups {prev} and {g}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Token id → index of its group.
    pub fn lookup(&self) -> HashMap<u32, usize> {
        self.groups
            .iter()
            .enumerate()
            .flat_map(|(g, m)| m.iter().map(move |&t| (t, g)))
            .collect()
    }

    pub fn group_of(&self, token: u32) -> Option<&[u32]> {
        self.groups.iter().find(|g| g.contains(&token)).map(Vec::as_slice)
    }
}
