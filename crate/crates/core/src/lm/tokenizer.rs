use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lower-cased whitespace word tokenizer with four reserved ids.
/// Words outside the vocabulary map to `<unk>`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    vocab: Vec<String>,
}

impl Tokenizer {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        for w in words {
            let w = normalize(w);
            if w.is_empty() || index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), vocab.len() as u32);
            vocab.push(w);
        }
        Self { vocab, index }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: TokenizerFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_vocab(file.vocab)
    }

    /// Rebuilds from a saved vocabulary, which must start with the reserved tokens.
    pub fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        if vocab.len() < SPECIALS.len() || vocab[..SPECIALS.len()] != SPECIALS {
            return Err(Error::config(
                "tokenizer vocabulary lacks the reserved tokens",
            ));
        }
        Ok(Self::new(
            vocab[SPECIALS.len()..].iter().map(String::as_str),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = TokenizerFile {
            vocab: self.vocab.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(&normalize(word)).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len() && id != UNK
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        text.split_whitespace()
            .map(normalize)
            .filter(|w| !w.is_empty())
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins the non-special tokens with single spaces.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !Self::is_special(id))
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn normalize(word: &str) -> String {
    word.trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>')
        .to_lowercase()
}
