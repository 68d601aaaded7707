//! Word-level tokenizer for the VQA decoder.
//!
//! The vocabulary is built from a training corpus: every text is lowercased,
//! punctuation is stripped, and the surviving words are collected in sorted
//! order behind a fixed block of special tokens. Word-level granularity keeps
//! desk-scale corpora tiny and makes exact-match evaluation deterministic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::normalize_tokens;

/// Padding token id (fills ragged batches; never scored).
pub const PAD: usize = 0;
/// Beginning-of-sequence id, emitted once before the question.
pub const BOS: usize = 1;
/// End-of-sequence id, terminates every training answer and greedy decode.
pub const EOS: usize = 2;
/// Out-of-vocabulary fallback id.
pub const UNK: usize = 3;
/// Image-prefix marker id, reserved for the fused multimodal sequence.
pub const IMG: usize = 4;

const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<img>"];

/// Word-level vocabulary with a fixed special-token block at ids `0..5`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Tokenizer {
    /// Builds a vocabulary from the given corpus texts. Words are normalized
    /// (lowercased, punctuation stripped) and deduplicated; the word list is
    /// sorted so the mapping is independent of corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Tokenizer {
        let mut words: Vec<String> = corpus
            .into_iter()
            .flat_map(|text| normalize_tokens(text))
            .collect();
        words.sort();
        words.dedup();
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(words);
        let mut t = Tokenizer { vocab, index: BTreeMap::new() };
        t.rebuild_index();
        t
    }

    /// Restores the word → id map after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    /// Normalizes `text` and maps each word to its id, falling back to
    /// [`UNK`] for out-of-vocabulary words. Special-token ids are never
    /// produced from plain text.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize_tokens(text)
            .iter()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// Joins the words behind `ids` with single spaces, skipping special
    /// tokens. Unknown ids are an error.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut words = Vec::new();
        for &id in ids {
            if id >= self.vocab.len() {
                return Err(Error::Invalid(format!(
                    "decode: id {id} out of range (vocab {})",
                    self.vocab.len()
                )));
            }
            if id >= SPECIALS.len() {
                words.push(self.vocab[id].as_str());
            }
        }
        Ok(words.join(" "))
    }

    /// The surface form behind an id.
    pub fn token(&self, id: usize) -> Result<&str> {
        self.vocab
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| Error::Invalid(format!("token: id {id} out of range")))
    }
}
