//! Word-level tokenizer with lowercasing and punctuation splitting.
//!
//! Reserved ids are fixed:
//!
//! | id | token   |
//! |----|---------|
//! | 0  | `<pad>` |
//! | 1  | `<bos>` |
//! | 2  | `<unk>` |
//! | 3  | `q:`    |
//! | 4  | `a:`    |
//! | 5  | newline |
//!
//! `Q:` and `A:` are recognised only when the colon immediately follows the
//! letter, so the article "a" stays an ordinary word.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusBundle;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const UNK: u32 = 2;
pub const Q_MARK: u32 = 3;
pub const A_MARK: u32 = 4;
pub const NEWLINE: u32 = 5;

const RESERVED: [&str; 6] = ["<pad>", "<bos>", "<unk>", "q:", "a:", "\n"];
const VOCAB_FORMAT: &str = "pitlab-vocab";
const VOCAB_VERSION: u32 = 1;

/// Token ids of one encoded text.
pub type TokenSequence = Vec<u32>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format: String,
    version: u32,
    tokens: BTreeMap<String, u32>,
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("vocabulary file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported vocabulary header {format} v{version}")]
    Header { format: String, version: u32 },
    #[error("vocabulary ids are not a contiguous bijection (problem at id {0})")]
    NotBijective(u32),
    #[error("reserved token {token:?} must have id {expected}")]
    Reserved { token: String, expected: u32 },
}

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '\'' && c != '-'
}

/// Splits text into lowercase word pieces. Newlines become their own piece.
pub fn pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<String>| {
        if !word.is_empty() {
            out.push(std::mem::take(word));
        }
    };
    for c in text.chars() {
        if c == '\n' {
            flush(&mut word, &mut out);
            out.push("\n".to_string());
        } else if c.is_whitespace() {
            flush(&mut word, &mut out);
        } else if c == ':' && (word == "q" || word == "a") {
            word.push(':');
            flush(&mut word, &mut out);
        } else if is_split_punct(c) {
            flush(&mut word, &mut out);
            out.push(c.to_string());
        } else {
            word.extend(c.to_lowercase());
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Canonical surface form: lowercase pieces joined by single spaces, with
/// newlines kept as bare line breaks.
pub fn canonicalize(text: &str) -> String {
    join_pieces(pieces(text).iter().map(String::as_str))
}

fn join_pieces<'a>(it: impl Iterator<Item = &'a str>) -> String {
    let mut out = String::new();
    let mut at_line_start = true;
    for p in it {
        if p == "\n" {
            out.push('\n');
            at_line_start = true;
        } else {
            if !at_line_start {
                out.push(' ');
            }
            out.push_str(p);
            at_line_start = false;
        }
    }
    out
}

impl Vocab {
    /// Reserved tokens first, then every word of the bundle ordered by
    /// descending frequency and lexicographically within ties.
    pub fn build(bundle: &CorpusBundle) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in bundle.texts() {
            for p in pieces(text) {
                *counts.entry(p).or_default() += 1;
            }
        }
        Self::from_counts(counts)
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for p in pieces(text) {
                *counts.entry(p).or_default() += 1;
            }
        }
        Self::from_counts(counts)
    }

    fn from_counts(counts: HashMap<String, u64>) -> Self {
        let mut words: Vec<(String, u64)> =
            counts.into_iter().filter(|(w, _)| !RESERVED.contains(&w.as_str())).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> =
            RESERVED.iter().map(|s| s.to_string()).chain(words.into_iter().map(|(w, _)| w)).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        pieces(text).iter().map(|p| self.id(p).unwrap_or(UNK)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        join_pieces(ids.iter().map(|&i| self.token(i).unwrap_or("<unk>")))
    }

    /// SHA-256 over the id-ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            format: VOCAB_FORMAT.to_string(),
            version: VOCAB_VERSION,
            tokens: self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect(),
        };
        serde_json::to_string_pretty(&file).expect("vocab serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, VocabError> {
        let file: VocabFile = serde_json::from_str(s)?;
        if file.format != VOCAB_FORMAT || file.version != VOCAB_VERSION {
            return Err(VocabError::Header { format: file.format, version: file.version });
        }
        let mut slots: Vec<Option<String>> = vec![None; file.tokens.len()];
        for (tok, id) in file.tokens {
            match slots.get_mut(id as usize) {
                Some(s @ None) => *s = Some(tok),
                _ => return Err(VocabError::NotBijective(id)),
            }
        }
        let tokens: Vec<String> = slots
            .into_iter()
            .enumerate()
            .map(|(i, s)| s.ok_or(VocabError::NotBijective(i as u32)))
            .collect::<Result<_, _>>()?;
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(VocabError::Reserved { token: r.to_string(), expected: i as u32 });
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}
