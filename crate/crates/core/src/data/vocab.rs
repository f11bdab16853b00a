use std::collections::{BTreeMap, HashMap};

use super::MemeRecord;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_tokens(Vec::new())
    }
}

impl Vocab {
    /// Builds a vocab from non-reserved tokens; reserved ids 0..4 are prepended.
    pub fn from_tokens(words: Vec<String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().filter(|w| !RESERVED.contains(&w.as_str())));
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    /// Full token list including the reserved prefix, in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
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
}

/// Lowercased maximal alphanumeric runs; whitespace and punctuation separate words.
pub fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// `[CLS] w1 .. wn [SEP]`, word ids truncated to `max_len - 2`.
pub fn tokenize(vocab: &Vocab, s: &str, max_len: usize) -> Vec<usize> {
    tokenize_with_info(vocab, s, max_len).0
}

/// Like [`tokenize`] but also reports whether words were dropped.
pub fn tokenize_with_info(vocab: &Vocab, s: &str, max_len: usize) -> (Vec<usize>, bool) {
    assert!(max_len >= 3, "max_len must be at least 3, got {max_len}");
    let ws = words(s);
    let keep = ws.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(CLS);
    ids.extend(ws[..keep].iter().map(|w| vocab.id(w).unwrap_or(UNK)));
    ids.push(SEP);
    (ids, keep < ws.len())
}

/// Counts words over text and caption; keeps those with `count >= min_count`,
/// ordered by count descending then token ascending.
pub fn build_vocab(records: &[MemeRecord], min_count: usize) -> Vocab {
    assert!(min_count >= 1, "min_count must be at least 1");
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        for w in words(&r.text)
            .into_iter()
            .chain(r.caption.iter().flat_map(|c| words(c)))
        {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(kept.into_iter().map(|(w, _)| w).collect())
}
