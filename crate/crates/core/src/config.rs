//! The run configuration file shared by every CLI subcommand.
//!
//! One TOML document with a `[model]`, `[train]`, `[corpus]` and `[eval]`
//! section. Every key is optional and falls back to its default; unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelConfig;
use crate::corpus::{FilterConfig, DEFAULT_JACCARD, DEFAULT_NGRAM};
use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Near-duplicate threshold on token-set Jaccard similarity.
    pub jaccard: f64,
    /// Decontamination n-gram length in whitespace tokens.
    pub ngram: usize,
    pub filter: FilterConfig,
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            jaccard: DEFAULT_JACCARD,
            ngram: DEFAULT_NGRAM,
            filter: FilterConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Sizes of generated corpora, per language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub repos: usize,
    pub files_per_repo: usize,
    /// Bytes per generated file.
    pub file_len: usize,
    /// Documents when writing line-delimited output directly.
    pub docs: usize,
    /// Bytes per generated document.
    pub doc_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { repos: 16, files_per_repo: 4, file_len: 400, docs: 64, doc_len: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Predicted positions per evaluation window.
    pub seq_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { seq_len: 64 }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Format { what: "config", detail: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format { what, detail: format!("{}: {detail}", path.display()) },
            e => e,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config values are always representable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(0.0..=1.0).contains(&self.corpus.jaccard) {
            return Err(Error::contract("corpus.jaccard must lie in [0, 1]"));
        }
        if self.corpus.ngram == 0 {
            return Err(Error::contract("corpus.ngram must be at least 1"));
        }
        if self.eval.seq_len == 0 {
            return Err(Error::contract("eval.seq_len must be at least 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&d.to_toml()).unwrap(), d);
        assert_eq!(RunConfig::from_toml("").unwrap(), d);
    }

    #[test]
    fn partial_files_override_only_their_keys() {
        let c = RunConfig::from_toml("[train]\nlearning_rate = 0.003\n[corpus.filter]\nmax_line = 80\n").unwrap();
        assert_eq!(c.train.learning_rate, 0.003);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.corpus.filter.max_line, 80);
        assert_eq!(c.corpus.filter.max_avg_line, 100);
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nlr = 1"), Err(Error::Format { .. })));
        assert!(matches!(RunConfig::from_toml("[model]\nn_q_heads = 3"), Err(Error::Contract(_))));
        assert!(RunConfig::from_toml("[corpus]\njaccard = 1.5").is_err());
        assert!(RunConfig::from_toml("[eval]\nseq_len = 0").is_err());
    }
}
