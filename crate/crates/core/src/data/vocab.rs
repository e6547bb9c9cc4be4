//! Whitespace vocabulary and tokenizer.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::model::TokenBatch;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const VOCAB_FILE: &str = "vocab.txt";

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token table with ids dense from 0; ids 0..3 are PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids followed by `words` sorted and deduplicated.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().to_lowercase())
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).chain(set).collect();
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Every caption word of every language.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::from_words(
            ds.records()
                .iter()
                .flat_map(|r| r.captions.iter())
                .flat_map(|c| c.split_whitespace())
                .filter(|w| *w != super::CAPTION_SEPARATOR.trim()),
        )
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..4] != RESERVED {
            return Err(Error::Format("vocabulary must start with <pad> <bos> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Format(format!("invalid vocabulary token on line {}", i + 1)));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

/// Lowercased whitespace tokens wrapped in BOS/EOS, truncated to `max_len`
/// (BOS and EOS always kept) and padded with PAD. Returns ids and the
/// unpadded length.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> (Vec<usize>, usize) {
    assert!(max_len >= 3, "max_len must be at least 3");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    let lower = text.to_lowercase();
    ids.extend(lower.split_whitespace().take(max_len - 2).map(|w| vocab.id(w)));
    ids.push(EOS);
    let len = ids.len();
    ids.resize(max_len, PAD);
    (ids, len)
}

pub fn tokenize_batch<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary, max_len: usize) -> Result<TokenBatch> {
    let (rows, lens): (Vec<_>, Vec<_>) = texts.iter().map(|t| tokenize(t.as_ref(), vocab, max_len)).unzip();
    TokenBatch::new(&rows, &lens)
}
