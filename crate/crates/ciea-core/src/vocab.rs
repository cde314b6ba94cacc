//! Corpus-built vocabulary and whitespace/punctuation tokenization.
//!
//! Four IDs are reserved: 0 `<pad>`, 1 `<mask>`, 2 `<start>`, 3 `<end>`.
//! Remaining IDs are assigned deterministically by (count desc, token asc),
//! so the same corpus always yields the same vocabulary. Out-of-vocabulary
//! tokens are dropped rather than mapped to an unknown token, which keeps
//! the query/document segment matching unambiguous.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const START_ID: usize = 2;
pub const END_ID: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<mask>", "<start>", "<end>"];

/// Default maximum text length in tokens.
pub const DEFAULT_MAX_TEXT_LEN: usize = 128;

/// Token IDs over a fixed vocabulary. All IDs are below the vocabulary size
/// of the vocabulary that produced the sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::contract(format!(
                "token id {bad} out of range for vocabulary of size {vocab_size}"
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn empty() -> Self {
        TokenSequence { ids: Vec::new() }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Bijective token ↔ ID map with fixed reserved IDs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw texts. Tokens occurring at least
    /// `min_count` times are admitted; IDs follow (count desc, token asc).
    pub fn build<S: AsRef<str>>(texts: &[S], min_count: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::contract("cannot build a vocabulary from no texts"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for word in split_words(text.as_ref()) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut admitted: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_count)
            .collect();
        admitted.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(admitted.into_iter().map(|(t, _)| t));
        Ok(Self::from_tokens(tokens))
    }

    /// Reconstructs a vocabulary from an ID-ordered token list (checkpoint
    /// manifests store this form).
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() {
            return Err(Error::contract("vocabulary must contain the reserved tokens"));
        }
        for (i, expected) in RESERVED.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::contract(format!(
                    "reserved slot {i} holds {:?}, expected {expected:?}",
                    tokens[i]
                )));
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Lowercases, splits on whitespace/punctuation, drops OOV words, and
    /// truncates to the first `max_len` admitted IDs.
    pub fn tokenize(&self, text: &str, max_len: usize) -> TokenSequence {
        let ids = split_words(text)
            .filter_map(|w| self.index.get(&w).copied())
            .take(max_len)
            .collect();
        TokenSequence { ids }
    }

    /// Inverse of [`Vocabulary::tokenize`] on the admitted-token subsequence.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        seq.ids()
            .iter()
            .filter_map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Lowercased word stream: maximal runs of alphanumeric characters.
fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_then_lexicographic_ordering() {
        let vocab = Vocabulary::build(&["a b", "a c"], 1).unwrap();
        assert_eq!(vocab.size(), 7);
        assert_eq!(vocab.id("a"), Some(4));
        assert_eq!(vocab.id("b"), Some(5));
        assert_eq!(vocab.id("c"), Some(6));
    }

    #[test]
    fn min_count_filters() {
        let vocab = Vocabulary::build(&["a b", "a c"], 2).unwrap();
        assert_eq!(vocab.size(), 5);
        assert_eq!(vocab.id("a"), Some(4));
        assert_eq!(vocab.id("b"), None);
    }

    #[test]
    fn empty_input_is_a_contract_error() {
        let texts: Vec<&str> = Vec::new();
        assert!(Vocabulary::build(&texts, 1).is_err());
    }

    #[test]
    fn tokenize_lowercases() {
        let vocab = Vocabulary::build(&["a b"], 1).unwrap();
        let seq = vocab.tokenize("A b", 16);
        assert_eq!(seq.ids(), &[vocab.id("a").unwrap(), vocab.id("b").unwrap()]);
    }

    #[test]
    fn tokenize_drops_oov() {
        let vocab = Vocabulary::build(&["a"], 1).unwrap();
        let seq = vocab.tokenize("x y z", 16);
        assert!(seq.is_empty());
    }

    #[test]
    fn tokenize_truncates_admitted_prefix() {
        let vocab = Vocabulary::build(&["w"], 1).unwrap();
        let text = std::iter::repeat("w").take(200).collect::<Vec<_>>().join(" ");
        let seq = vocab.tokenize(&text, 128);
        assert_eq!(seq.len(), 128);
    }

    #[test]
    fn punctuation_splits_words() {
        let vocab = Vocabulary::build(&["red,bridge. night-view"], 1).unwrap();
        assert!(vocab.id("red").is_some());
        assert!(vocab.id("bridge").is_some());
        assert!(vocab.id("night").is_some());
        assert!(vocab.id("red,bridge").is_none());
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let vocab = Vocabulary::build(&["zzz"], 1).unwrap();
        assert_eq!(vocab.token(PAD_ID), Some("<pad>"));
        assert_eq!(vocab.token(MASK_ID), Some("<mask>"));
        assert_eq!(vocab.token(START_ID), Some("<start>"));
        assert_eq!(vocab.token(END_ID), Some("<end>"));
    }

    proptest! {
        /// detokenize ∘ tokenize reproduces the admitted-token subsequence.
        #[test]
        fn round_trip_admitted_subsequence(words in proptest::collection::vec("[a-z]{1,6}", 1..20)) {
            let text = words.join(" ");
            let vocab = Vocabulary::build(&[text.as_str()], 1).unwrap();
            let seq = vocab.tokenize(&text, 128);
            let round = vocab.detokenize(&seq);
            let admitted: Vec<String> = words
                .iter()
                .filter(|w| vocab.id(w).is_some())
                .take(128)
                .cloned()
                .collect();
            prop_assert_eq!(round, admitted.join(" "));
        }
    }
}
