use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u16 = 0;
pub const BOS: u16 = 1;
pub const EOS: u16 = 2;

/// Every word the caption grammar can emit, in id order after the reserved
/// tokens.
pub const VOCAB_WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", //
    "a", "an", "and", ",", "on", "in", "at", "under", "the", "with", "of", "picture", //
    "small", "large", //
    "red", "green", "blue", "yellow", "purple", "orange", "white", "pink", //
    "circle", "square", "triangle", "star", //
    "background", "black", "gray", "navy", "beige", //
    "top", "bottom", "left", "right", "center", //
    "sky", "night", "sunset", "foggy", "moonlit", "warm", "glow", "dramatic", "lighting", "soft", "light",
    "plain", "scene",
];

/// Bijection between caption words and token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, u16>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_words(VOCAB_WORDS.iter().map(|w| w.to_string()).collect()).expect("builtin vocabulary")
    }
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 3 || words[0] != "<pad>" || words[1] != "<bos>" || words[2] != "<eos>" {
            return Err(Error::format("vocabulary", "reserved tokens must occupy ids 0, 1, 2"));
        }
        if words.len() > u16::MAX as usize {
            return Err(Error::format("vocabulary", "too many tokens"));
        }
        let mut ids = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::format("vocabulary", format!("bad token {w:?}")));
            }
            if ids.insert(w.clone(), i as u16).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {w:?}")));
            }
        }
        Ok(Self { words, ids })
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

    pub fn id(&self, word: &str) -> Option<u16> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u16) -> Result<&str> {
        self.words
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::Vocabulary {
                id: id as usize,
                size: self.words.len(),
            })
    }

    /// Whitespace tokenization; commas may be attached to the preceding word.
    pub fn encode(&self, text: &str) -> Result<Vec<u16>> {
        let spaced = text.replace(',', " , ");
        spaced
            .split_whitespace()
            .map(|w| {
                let lower = w.to_lowercase();
                self.id(&lower).ok_or(Error::UnknownWord(lower))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[u16]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let w = self.word(id)?;
            if w == "," {
                out.push(',');
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(w);
        }
        Ok(out)
    }

    /// One token per line, in id order.
    pub fn to_sidecar(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_sidecar(text: &str) -> Result<Self> {
        Self::from_words(text.lines().map(str::to_string).collect())
    }
}
