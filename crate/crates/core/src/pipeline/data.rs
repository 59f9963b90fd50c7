use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::backbone::TokenBatch;
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::language::Language;

/// `seq_len + 1` consecutive tokens of one document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub tokens: Vec<usize>,
    pub language: Language,
}

/// Fixed-length training windows cut from repository-level documents.
///
/// Consecutive windows of a document overlap by one token, so every
/// next-token transition inside a covered span is predicted exactly once.
/// A trailing remainder shorter than a full window is not used.
#[derive(Debug, Clone)]
pub struct SequenceSet {
    seq_len: usize,
    windows: Vec<Window>,
}

impl SequenceSet {
    pub fn from_documents(docs: &[Document], seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::contract("seq_len must be at least 1"));
        }
        let mut windows = Vec::new();
        for d in docs {
            let ids = d.token_ids();
            let mut start = 0;
            while start + seq_len < ids.len() {
                windows.push(Window { tokens: ids[start..=start + seq_len].to_vec(), language: d.language });
                start += seq_len;
            }
        }
        if windows.is_empty() {
            return Err(Error::contract(format!(
                "corpus of {} documents yields no sequence of {} tokens",
                docs.len(),
                seq_len + 1
            )));
        }
        Ok(SequenceSet { seq_len, windows })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn steps_per_epoch(&self, batch_size: usize) -> usize {
        self.windows.len().div_ceil(batch_size)
    }

    /// Inputs, targets and per-token languages of the given windows.
    pub fn batch(&self, idx: &[usize]) -> Result<(TokenBatch, Vec<usize>, Vec<Language>)> {
        let mut inputs = Vec::with_capacity(idx.len() * self.seq_len);
        let mut targets = Vec::with_capacity(idx.len() * self.seq_len);
        let mut langs = Vec::with_capacity(idx.len() * self.seq_len);
        for &i in idx {
            let w = &self.windows[i];
            inputs.extend_from_slice(&w.tokens[..self.seq_len]);
            targets.extend_from_slice(&w.tokens[1..]);
            langs.extend(std::iter::repeat_n(w.language, self.seq_len));
        }
        Ok((TokenBatch::new(idx.len(), self.seq_len, inputs)?, targets, langs))
    }
}

/// Shuffled passes over window indices; a batch may straddle two passes.
pub(crate) struct BatchOrder {
    order: Vec<usize>,
    pos: usize,
}

impl BatchOrder {
    pub(crate) fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchOrder { order, pos: 0 }
    }

    pub(crate) fn next(&mut self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch_size);
        while out.len() < batch_size {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
