use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::synth;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const AE: usize = 4;

pub const RESERVED: [&str; 5] = ["[PAD]", "[BOS]", "[EOS]", "[SEP]", "[AE]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in order, duplicates dropped.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_string());
        }
        for w in words {
            let w = w.into();
            if w.is_empty() {
                return Err(Error::Input("empty vocabulary entry".into()));
            }
            if RESERVED.contains(&w.as_str()) {
                continue;
            }
            v.push(w);
        }
        Ok(v)
    }

    fn push(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.tokens.len());
            self.tokens.push(w);
        }
    }

    /// The closed vocabulary of the synthetic corpora.
    pub fn synthetic() -> Self {
        Self::new(synth::all_words()).expect("static word lists are valid")
    }

    /// Every printable ASCII character.
    pub fn ascii() -> Self {
        Self::new((32u8..127).map(|b| (b as char).to_string())).expect("printable ASCII")
    }

    /// Every whitespace-separated word of `texts`, sorted.
    pub fn from_texts<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Result<Self> {
        let mut words: Vec<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        words.sort_unstable();
        words.dedup();
        Self::new(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    Word,
    Char,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub mode: TokenizerMode,
    pub vocab: Vocab,
}

/// Serializable form stored next to checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    pub mode: TokenizerMode,
    pub tokens: Vec<String>,
}

impl Tokenizer {
    pub fn word(vocab: Vocab) -> Self {
        Self {
            mode: TokenizerMode::Word,
            vocab,
        }
    }

    pub fn char() -> Self {
        Self {
            mode: TokenizerMode::Char,
            vocab: Vocab::ascii(),
        }
    }

    pub fn synthetic() -> Self {
        Self::word(Vocab::synthetic())
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Raw text never yields reserved ids: bracketed reserved names are
    /// rejected as unknown.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let lookup = |t: &str| match self.vocab.id(t) {
            Some(id) if id >= RESERVED.len() => Ok(id),
            _ => Err(Error::UnknownToken(t.to_string())),
        };
        match self.mode {
            TokenizerMode::Word => text.split_whitespace().map(lookup).collect(),
            TokenizerMode::Char => text
                .chars()
                .map(|c| lookup(c.encode_utf8(&mut [0; 4])))
                .collect(),
        }
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        let words = ids.iter().map(|&i| self.vocab.token(i).unwrap_or("[UNK]"));
        match self.mode {
            TokenizerMode::Word => words.collect::<Vec<_>>().join(" "),
            TokenizerMode::Char => words.collect(),
        }
    }

    pub fn spec(&self) -> TokenizerSpec {
        TokenizerSpec {
            mode: self.mode,
            tokens: self.vocab.tokens()[RESERVED.len()..].to_vec(),
        }
    }

    pub fn from_spec(spec: &TokenizerSpec) -> Result<Self> {
        Ok(Self {
            mode: spec.mode,
            vocab: Vocab::new(spec.tokens.iter().cloned())?,
        })
    }
}
