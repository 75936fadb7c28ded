//! Tokenization shared by the retriever, the prompt-length cap and the
//! miniature backbone.
//!
//! Text is split into bracketed special tokens (`[SEP]`, `[CLS]`, ...), runs
//! of word characters, and single punctuation characters. Ordinary tokens are
//! lowercased; special tokens are kept verbatim.

use std::collections::{BTreeMap, HashMap};
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = "[SEP]";
pub const CLS: &str = "[CLS]";
pub const SEEKER: &str = "[SEEKER]";
pub const SUPPORTER: &str = "[SUPPORTER]";

/// Number of strategy tokens reserved in every vocabulary.
pub const STRATEGY_TOKENS: usize = 8;

fn token_pattern() -> &'static Regex {
    static PATTERN: OnceLock<Regex> = OnceLock::new();
    PATTERN.get_or_init(|| Regex::new(r"\[[A-Z][A-Z_0-9]*\]|\w+|[^\w\s]").expect("static regex"))
}

/// Splits `text` into tokens. Deterministic, allocation per token.
pub fn tokenize(text: &str) -> Vec<String> {
    token_pattern()
        .find_iter(text)
        .map(|m| {
            let s = m.as_str();
            if is_special(s) {
                s.to_string()
            } else {
                s.to_lowercase()
            }
        })
        .collect()
}

/// Token count under [`tokenize`].
pub fn count_tokens(text: &str) -> usize {
    token_pattern().find_iter(text).count()
}

/// Longest prefix of `text` holding at most `n` tokens.
pub fn truncate_tokens(text: &str, n: usize) -> &str {
    if n == 0 {
        return "";
    }
    match token_pattern().find_iter(text).nth(n - 1) {
        Some(m) => &text[..m.end()],
        None => text,
    }
}

fn is_special(s: &str) -> bool {
    s.len() > 2 && s.starts_with('[') && s.ends_with(']')
}

/// Name of the special token standing for strategy `id`.
pub fn strategy_token(id: usize) -> String {
    format!("[STRAT_{id}]")
}

/// Word-level vocabulary with reserved special and strategy tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn specials() -> Vec<String> {
        let mut v: Vec<String> = [PAD, UNK, BOS, EOS, SEP, CLS, SEEKER, SUPPORTER]
            .iter()
            .map(|s| s.to_string())
            .collect();
        v.extend((0..STRATEGY_TOKENS).map(strategy_token));
        v
    }

    /// Builds a vocabulary of at most `max_size` entries: the reserved
    /// tokens followed by the most frequent words of `texts` (ties broken
    /// lexicographically).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let specials = Self::specials();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for text in texts {
            for tok in tokenize(text) {
                if !is_special(&tok) {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = max_size.saturating_sub(specials.len());
        let mut tokens = specials;
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk())
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn pad(&self) -> usize {
        0
    }
    pub fn unk(&self) -> usize {
        1
    }
    pub fn bos(&self) -> usize {
        2
    }
    pub fn eos(&self) -> usize {
        3
    }
    pub fn sep(&self) -> usize {
        4
    }
    pub fn cls(&self) -> usize {
        5
    }
    pub fn seeker(&self) -> usize {
        6
    }
    pub fn supporter(&self) -> usize {
        7
    }

    /// Id of the strategy token for label `id`.
    pub fn strategy(&self, id: usize) -> usize {
        8 + id
    }

    /// Inverse of [`Vocab::strategy`].
    pub fn strategy_of(&self, token_id: usize) -> Option<usize> {
        (8..8 + STRATEGY_TOKENS)
            .contains(&token_id)
            .then(|| token_id - 8)
    }

    /// True for the reserved tokens that may never appear in generated text.
    pub fn is_reserved(&self, token_id: usize) -> bool {
        token_id < 8 + STRATEGY_TOKENS && token_id != self.eos()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Joins word tokens with single spaces, dropping reserved tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !self.is_reserved(i) && i != self.eos())
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
