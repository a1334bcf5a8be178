use std::collections::HashMap;

use crate::error::{Error, Result};

/// Closed whitespace vocabulary. Ids are assigned in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for w in words {
            let w = w.into();
            if v.index.contains_key(&w) {
                return Err(Error::Format(format!("duplicate vocabulary word `{w}`")));
            }
            v.insert(&w);
        }
        Ok(v)
    }

    /// Adds `word` if absent and returns its id.
    pub fn insert(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenization; every token must already be in the vocabulary.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| Error::Format(format!("out-of-vocabulary token `{w}`")))
            })
            .collect()
    }

    /// Adds every whitespace token of `text`.
    pub fn extend_from(&mut self, text: &str) {
        for w in text.split_whitespace() {
            self.insert(w);
        }
    }

    /// One word per line.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }
}
