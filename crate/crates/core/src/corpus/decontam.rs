use std::collections::HashSet;

use super::{Document, Removal, StageLedger};
use crate::error::{Error, Result};

pub const DEFAULT_NGRAM: usize = 10;

/// Every n-gram of whitespace-delimited tokens from a set of texts.
///
/// Tokens are compared raw: no case folding or other normalization. An
/// n-gram is stored as its tokens joined by a single space, which is
/// unambiguous because tokens never contain whitespace.
#[derive(Debug, Clone)]
pub struct NgramIndex {
    n: usize,
    grams: HashSet<String>,
}

impl NgramIndex {
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::contract("n-gram length must be at least 1"));
        }
        let mut grams = HashSet::new();
        for t in texts {
            let toks: Vec<&str> = t.split_whitespace().collect();
            grams.extend(toks.windows(n).map(|w| w.join(" ")));
        }
        Ok(NgramIndex { n, grams })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    /// The first n-gram of `text` present in the index.
    pub fn first_hit(&self, text: &str) -> Option<String> {
        if self.grams.is_empty() {
            return None;
        }
        let toks: Vec<&str> = text.split_whitespace().collect();
        toks.windows(self.n).map(|w| w.join(" ")).find(|g| self.grams.contains(g))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecontamOutcome {
    pub kept: Vec<Document>,
    pub ledger: StageLedger,
}

/// Removes every document that shares an `n`-gram with any test document.
/// Input order is preserved.
pub fn decontaminate(corpus: Vec<Document>, test_docs: &[Document], n: usize) -> Result<DecontamOutcome> {
    let index = NgramIndex::build(test_docs.iter().map(|d| d.text.as_str()), n)?;
    let input = corpus.len();
    let mut kept = Vec::with_capacity(input);
    let mut removed = Vec::new();
    for doc in corpus {
        match index.first_hit(&doc.text) {
            Some(gram) => removed.push(Removal {
                id: doc.doc_id,
                reason: "ngram_overlap".into(),
                detail: Some(gram),
            }),
            None => kept.push(doc),
        }
    }
    let ledger = StageLedger::new("decontaminate", "docs", input, kept.len(), removed);
    Ok(DecontamOutcome { kept, ledger })
}
