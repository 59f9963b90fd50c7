//! Corpus curation: file filtering, repository-level concatenation,
//! deduplication, n-gram decontamination, and a synthetic generator for three
//! related formal languages.
//!
//! Raw corpora live on disk as one directory per repository. Processed
//! corpora are JSON Lines files of [`Document`] records, each with a
//! [`CorpusManifest`] stored next to it under `<name>.manifest.json`.

mod decontam;
mod dedup;
mod filter;
mod store;
mod synth;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::language::Language;

pub use decontam::{decontaminate, DecontamOutcome, NgramIndex, DEFAULT_NGRAM};
pub use dedup::{dedup_repositories, jaccard, DedupOutcome, DEFAULT_JACCARD};
pub use filter::{filter_file, filter_repositories, DropReason, FilterConfig, FilterDecision};
pub use store::{
    load_repo_tree, manifest_path, read_documents, read_manifest, write_documents,
    write_manifest, write_repo_tree, RepoTree,
};
pub use synth::{generate_synthetic_corpus, generate_synthetic_repos, SHARED_KEYWORDS};

/// Default separator placed between files of one repository.
pub const FILE_SEPARATOR: &str = "\n\n";

/// A raw source file. Content is kept as bytes so that invalid UTF-8 can be
/// reported by the filter instead of failing the load.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceFile {
    pub repo_id: String,
    pub path: String,
    pub language: Language,
    pub content: Vec<u8>,
}

impl SourceFile {
    pub fn new(repo_id: impl Into<String>, path: impl Into<String>, language: Language, text: impl Into<String>) -> Self {
        SourceFile {
            repo_id: repo_id.into(),
            path: path.into(),
            language,
            content: text.into().into_bytes(),
        }
    }

    pub fn text(&self) -> Option<&str> {
        std::str::from_utf8(&self.content).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Repository {
    pub repo_id: String,
    pub files: Vec<SourceFile>,
}

impl Repository {
    /// The language shared by every file, or a contract error.
    pub fn language(&self) -> Result<Language> {
        let mut langs = self.files.iter().map(|f| f.language);
        let first = langs
            .next()
            .ok_or_else(|| Error::contract(format!("repository `{}` has no files", self.repo_id)))?;
        if let Some(other) = langs.find(|l| *l != first) {
            return Err(Error::contract(format!(
                "repository `{}` mixes {first} and {other}",
                self.repo_id
            )));
        }
        Ok(first)
    }
}

/// One training unit: a whole repository as a single text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub language: Language,
    pub text: String,
}

impl Document {
    pub fn token_ids(&self) -> Vec<usize> {
        tokenize(&self.text)
    }
}

/// Byte-level tokenization: one token per UTF-8 byte.
pub fn tokenize(text: &str) -> Vec<usize> {
    text.bytes().map(usize::from).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<String> {
    let bytes = ids
        .iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Index { what: "byte vocabulary", index: id, bound: 256 })
        })
        .collect::<Result<Vec<u8>>>()?;
    String::from_utf8(bytes).map_err(|e| Error::Format { what: "token sequence", detail: e.to_string() })
}

/// Joins a repository's files, ordered by path, into one document whose id is
/// the repository id.
pub fn concat_repository(files: &[SourceFile], separator: &str) -> Result<Document> {
    let first = files.first().ok_or_else(|| Error::contract("cannot concatenate an empty repository"))?;
    let mut sorted: Vec<&SourceFile> = files.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut text = String::new();
    for (i, f) in sorted.iter().enumerate() {
        if f.repo_id != first.repo_id {
            return Err(Error::contract(format!(
                "file `{}` belongs to `{}`, not `{}`",
                f.path, f.repo_id, first.repo_id
            )));
        }
        if f.language != first.language {
            return Err(Error::contract(format!(
                "repository `{}` mixes {} and {}",
                first.repo_id, first.language, f.language
            )));
        }
        if i > 0 && sorted[i - 1].path == f.path {
            return Err(Error::contract(format!("duplicate path `{}` in `{}`", f.path, f.repo_id)));
        }
        let body = f
            .text()
            .ok_or_else(|| Error::contract(format!("`{}/{}` is not valid UTF-8", f.repo_id, f.path)))?;
        if i > 0 {
            text.push_str(separator);
        }
        text.push_str(body);
    }
    Ok(Document { doc_id: first.repo_id.clone(), language: first.language, text })
}

/// Repository-level sequence construction: one document per repository,
/// files joined by [`FILE_SEPARATOR`] in path order.
pub fn pack_repositories(repos: &[Repository]) -> Result<Vec<Document>> {
    repos.iter().map(|r| concat_repository(&r.files, FILE_SEPARATOR)).collect()
}

/// One item removed by a pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Removal {
    pub id: String,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Input, kept and removed counts for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageLedger {
    pub stage: String,
    /// `files`, `repos` or `docs`.
    pub unit: String,
    pub input: usize,
    pub kept: usize,
    pub removed: Vec<Removal>,
}

impl StageLedger {
    pub fn new(stage: &str, unit: &str, input: usize, kept: usize, mut removed: Vec<Removal>) -> Self {
        removed.sort_by(|a, b| a.id.cmp(&b.id));
        StageLedger { stage: stage.into(), unit: unit.into(), input, kept, removed }
    }

    pub fn reconciles(&self) -> bool {
        self.kept + self.removed.len() == self.input
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageCounts {
    pub repos: usize,
    /// Unknown once files have been concatenated into documents by an
    /// earlier run that did not record them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<usize>,
    pub docs: usize,
    /// Byte tokens.
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub counts: BTreeMap<Language, LanguageCounts>,
    /// Every stage applied so far, oldest first.
    pub stages: Vec<StageLedger>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_hash: Option<String>,
}

impl CorpusManifest {
    pub fn for_repos(repos: &[Repository]) -> Self {
        let mut counts: BTreeMap<Language, LanguageCounts> = BTreeMap::new();
        for r in repos {
            let Some(lang) = r.files.first().map(|f| f.language) else { continue };
            let c = counts.entry(lang).or_default();
            c.repos += 1;
            *c.files.get_or_insert(0) += r.files.len();
            c.tokens += r.files.iter().map(|f| f.content.len()).sum::<usize>();
        }
        CorpusManifest { counts, stages: Vec::new(), corpus_hash: None }
    }

    pub fn for_documents(docs: &[Document]) -> Self {
        let mut counts: BTreeMap<Language, LanguageCounts> = BTreeMap::new();
        for d in docs {
            let c = counts.entry(d.language).or_default();
            c.repos += 1;
            c.docs += 1;
            c.tokens += d.text.len();
        }
        CorpusManifest { counts, stages: Vec::new(), corpus_hash: Some(corpus_hash(docs)) }
    }

    /// Fresh counts for the new corpus, keeping the stage history.
    pub fn advance(&self, mut next: CorpusManifest, stage: StageLedger) -> CorpusManifest {
        next.stages = self.stages.clone();
        next.stages.push(stage);
        next
    }
}

/// SHA-256 over every document's id, language and text, in order.
pub fn corpus_hash(docs: &[Document]) -> String {
    let mut h = Sha256::new();
    for d in docs {
        for part in [d.doc_id.as_bytes(), d.language.as_str().as_bytes(), d.text.as_bytes()] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part);
        }
    }
    hex(&h.finalize())
}

pub(crate) fn content_hash(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests;
