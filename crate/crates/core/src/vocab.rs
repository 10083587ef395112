//! Whitespace tokenization, vocabulary files and padded token batches.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
const NUM_SPECIALS: usize = 3;

/// Token ↔ id mapping. Ids 0..3 are the specials; file line `i` is id `i + 3`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Lowercased whitespace split.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut all = vec![CLS.to_string(), PAD.to_string(), UNK.to_string()];
        let mut index = HashMap::new();
        for (i, t) in all.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        for t in tokens {
            if index.contains_key(&t) {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid vocabulary entry {t:?}")));
            }
            index.insert(t.clone(), all.len());
            all.push(t);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    /// Sorted set of every token appearing in `lines`.
    pub fn build<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = lines.into_iter().flat_map(tokenize).collect();
        Self::from_tokens(set).expect("token set has no duplicates")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-special tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[NUM_SPECIALS..]
    }

    /// CLS followed by the sentence's ids, truncated to `max_len` in total.
    pub fn encode(&self, sentence: &str, max_len: usize) -> Vec<usize> {
        std::iter::once(CLS_ID)
            .chain(tokenize(sentence).map(|t| self.id(&t)))
            .take(max_len)
            .collect()
    }

    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for t in self.entries() {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(str::to_string))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Padded batch; position 0 of every row is CLS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    /// `batch × seq` ids, padded with [`PAD_ID`].
    pub token_ids: Vec<Vec<usize>>,
    pub attn_mask: Vec<Vec<bool>>,
    /// Non-pad tokens per row, CLS included.
    pub effective_lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads CLS-prefixed sequences to the longest one.
    pub fn new(sequences: &[Vec<usize>]) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let seq = sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut token_ids = Vec::with_capacity(sequences.len());
        let mut attn_mask = Vec::with_capacity(sequences.len());
        let mut effective_lengths = Vec::with_capacity(sequences.len());
        for (i, s) in sequences.iter().enumerate() {
            if s.first() != Some(&CLS_ID) {
                return Err(Error::Input(format!("sequence {i} does not start with CLS")));
            }
            let mut ids = s.clone();
            ids.resize(seq, PAD_ID);
            token_ids.push(ids);
            attn_mask.push((0..seq).map(|p| p < s.len()).collect());
            effective_lengths.push(s.len());
        }
        Ok(TokenBatch {
            token_ids,
            attn_mask,
            effective_lengths,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.token_ids.len()
    }

    /// Padded sequence length (CLS included).
    pub fn seq_len(&self) -> usize {
        self.token_ids.first().map_or(0, Vec::len)
    }

    /// Contextual (non-CLS, non-pad) tokens in row `b`.
    pub fn contextual_len(&self, b: usize) -> usize {
        self.effective_lengths[b] - 1
    }
}
