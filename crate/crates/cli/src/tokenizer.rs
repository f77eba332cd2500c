//! Word-level frequency vocabulary.
//!
//! Text is lowercased and split into runs of alphanumeric characters and
//! single punctuation marks; whitespace separates and is dropped. The
//! vocabulary keeps the most frequent words of the training split (ties in
//! lexicographic order) after the reserved pad and unknown ids.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use token_thinner::model::{PAD_ID, UNK_ID};

use crate::error::{CliError, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

pub fn segment(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() && !ch.is_control() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Token strings by id; ids 0 and 1 are the pad and unknown tokens.
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// At most `max_size` entries including the two reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Result<Self> {
        if max_size <= UNK_ID {
            return Err(CliError::Config(format!(
                "vocabulary size {max_size} leaves no room for the reserved ids"
            )));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in segment(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(ranked.into_iter().take(max_size - 2).map(|(w, _)| w));
        Ok(Self::from_tokens(tokens))
    }

    /// Vocabulary with the given words in id order after the reserved ids.
    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Self {
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(words.iter().map(|w| w.as_ref().to_string()));
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Ids for `text`, truncated to `max_len`.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        segment(text).iter().take(max_len).map(|w| self.id(w)).collect()
    }

    /// Ids for `text`, truncated or padded to exactly `len`.
    pub fn tokenize_padded(&self, text: &str, len: usize) -> Vec<usize> {
        let mut ids = self.tokenize(text, len);
        ids.resize(len, PAD_ID);
        ids
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(&fs::read_to_string(path)?)?;
        if tokens.get(PAD_ID).map(String::as_str) != Some(PAD_TOKEN)
            || tokens.get(UNK_ID).map(String::as_str) != Some(UNK_TOKEN)
        {
            return Err(CliError::Data(format!(
                "{} is not a vocabulary file (reserved ids missing)",
                path.display()
            )));
        }
        Ok(Self::from_tokens(tokens))
    }
}
