//! Held-out evaluation: per-language cross-entropy and perplexity, routing
//! diagnostics for MoE checkpoints, and comparison tables across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::backbone::{Checkpoint, FfnKind, TokenBatch};
use crate::corpus::{corpus_hash, Document};
use crate::error::{Error, Result};
use crate::language::Language;
use crate::moe::stats::stats_from_langs;
use crate::moe::{ForwardOptions, RoutingStats};

/// Sequences evaluated per forward pass.
const EVAL_BATCH: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    /// Row name in comparison tables.
    pub label: String,
    /// Predicted positions per evaluation window.
    pub seq_len: usize,
    /// Recorded in the report; evaluation itself is not random.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { label: "model".into(), seq_len: 64, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageEval {
    /// Mean next-token cross-entropy in nats.
    pub ce: f64,
    /// `exp(ce)`.
    pub perplexity: f64,
    pub tokens: u64,
    pub docs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    /// One entry per MoE layer.
    pub layers: Vec<RoutingStats>,
    /// All layers pooled.
    pub aggregate: RoutingStats,
    /// Entropy of the pooled Top-1 expert histogram.
    pub unconditional_entropy: f64,
    /// Token-weighted mean of the per-language entropies.
    pub conditional_entropy: f64,
    pub per_language_entropy: BTreeMap<Language, f64>,
    /// Most frequent Top-1 expert per language.
    pub majority_expert: BTreeMap<Language, usize>,
    /// Mean shared-expert gate value; absent without a shared expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_gate_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub provenance: String,
    pub kind: FfnKind,
    pub seed: u64,
    pub corpus_hash: String,
    pub seq_len: usize,
    pub languages: BTreeMap<Language, LanguageEval>,
    /// Unweighted mean of the per-language perplexities.
    pub average_perplexity: f64,
    /// Present only for MoE checkpoints.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingReport>,
}

/// Cuts a document into windows of at most `seq_len + 1` tokens that
/// overlap by one, so every next-token transition is scored exactly once.
fn windows(ids: &[usize], seq_len: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + seq_len + 1).min(ids.len());
        out.push(&ids[start..end]);
        start += seq_len;
    }
    out
}

#[derive(Default)]
struct Accum {
    nll: f64,
    tokens: u64,
    docs: usize,
}

/// Scores `docs` with `ckpt`, grouped by language.
///
/// Cross-entropy is the mean next-token negative log-likelihood over every
/// predicted position of the language's documents. Routing statistics are
/// collected for MoE checkpoints only.
pub fn evaluate(ckpt: &Checkpoint, docs: &[Document], opts: &EvalOptions) -> Result<EvalReport> {
    if opts.seq_len == 0 {
        return Err(Error::contract("seq_len must be at least 1"));
    }
    let model = ckpt.to_model()?;
    let cfg = &model.config;
    if opts.seq_len > cfg.context_length {
        return Err(Error::contract(format!(
            "seq_len {} exceeds context length {}",
            opts.seq_len, cfg.context_length
        )));
    }
    let is_moe = cfg.ffn_kind == FfnKind::Moe;
    let mut per_lang: BTreeMap<Language, Accum> = BTreeMap::new();
    let mut layers: Vec<Option<RoutingStats>> = vec![None; if is_moe { cfg.n_layers } else { 0 }];
    let (mut lambda_sum, mut lambda_n) = (0.0, 0u64);

    for lang in Language::ALL {
        let lang_docs: Vec<&Document> = docs.iter().filter(|d| d.language == lang).collect();
        if lang_docs.is_empty() {
            continue;
        }
        let token_ids: Vec<Vec<usize>> = lang_docs.iter().map(|d| d.token_ids()).collect();
        // Group windows by length so each forward pass is rectangular.
        let mut by_len: BTreeMap<usize, Vec<&[usize]>> = BTreeMap::new();
        for ids in &token_ids {
            for w in windows(ids, opts.seq_len) {
                by_len.entry(w.len()).or_default().push(w);
            }
        }
        let acc = per_lang.entry(lang).or_default();
        acc.docs = lang_docs.len();
        for (len, group) in by_len {
            let t = len - 1;
            for chunk in group.chunks(EVAL_BATCH) {
                let inputs: Vec<usize> = chunk.iter().flat_map(|w| w[..t].iter().copied()).collect();
                let targets: Vec<usize> = chunk.iter().flat_map(|w| w[1..].iter().copied()).collect();
                let batch = TokenBatch::new(chunk.len(), t, inputs)?;
                let mut tape = Tape::new();
                let fwd = model.forward_on_tape(&mut tape, &batch, ForwardOptions::default(), false)?;
                let ce = tape.cross_entropy(fwd.logits, &targets)?;
                acc.nll += tape.value(ce).item() * targets.len() as f64;
                acc.tokens += targets.len() as u64;
                let langs = vec![lang; targets.len()];
                for (l, block) in fwd.moe.iter().enumerate() {
                    let s = stats_from_langs(tape.value(block.probs), &block.selected, &langs)?;
                    layers[l] = Some(match &layers[l] {
                        None => s,
                        Some(prev) => prev.merge(&s)?,
                    });
                    if let Some(lam) = block.lambda {
                        lambda_sum += tape.value(lam).data().iter().sum::<f64>();
                        lambda_n += tape.value(lam).numel() as u64;
                    }
                }
            }
        }
    }
    if per_lang.values().all(|a| a.tokens == 0) {
        return Err(Error::contract("evaluation corpus has no document of two or more tokens"));
    }

    let languages: BTreeMap<Language, LanguageEval> = per_lang
        .into_iter()
        .filter(|(_, a)| a.tokens > 0)
        .map(|(l, a)| {
            let ce = a.nll / a.tokens as f64;
            (l, LanguageEval { ce, perplexity: ce.exp(), tokens: a.tokens, docs: a.docs })
        })
        .collect();
    let average_perplexity = languages.values().map(|e| e.perplexity).sum::<f64>() / languages.len() as f64;

    let routing = if is_moe {
        let layers: Vec<RoutingStats> = layers
            .into_iter()
            .map(|s| s.ok_or_else(|| Error::contract("no routing statistics collected")))
            .collect::<Result<_>>()?;
        let mut aggregate = layers[0].clone();
        for s in &layers[1..] {
            aggregate = aggregate.merge(s)?;
        }
        Some(RoutingReport {
            unconditional_entropy: aggregate.unconditional_entropy(),
            conditional_entropy: aggregate.conditional_entropy(),
            per_language_entropy: aggregate
                .per_language
                .iter()
                .map(|(l, c)| (*l, crate::moe::entropy(c)))
                .collect(),
            majority_expert: Language::ALL
                .iter()
                .filter_map(|&l| aggregate.majority_expert(l).map(|e| (l, e)))
                .collect(),
            shared_gate_mean: (lambda_n > 0).then(|| lambda_sum / lambda_n as f64),
            layers,
            aggregate,
        })
    } else {
        None
    };

    Ok(EvalReport {
        label: opts.label.clone(),
        provenance: ckpt.provenance.clone(),
        kind: ckpt.kind,
        seed: opts.seed,
        corpus_hash: corpus_hash(docs),
        seq_len: opts.seq_len,
        languages,
        average_perplexity,
        routing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub label: String,
    pub provenance: String,
    pub perplexity: BTreeMap<Language, f64>,
    pub average: f64,
    /// Row minus baseline, per language.
    pub delta: BTreeMap<Language, f64>,
    pub delta_average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    pub corpus_hash: String,
    pub languages: Vec<Language>,
    pub rows: Vec<ComparisonRow>,
}

/// Tabulates perplexities of several reports against the row labelled
/// `baseline`. All reports must come from the same evaluation corpus.
pub fn compare(reports: &[EvalReport], baseline: &str) -> Result<ComparisonTable> {
    let first = reports.first().ok_or_else(|| Error::contract("nothing to compare"))?;
    for r in reports {
        if r.corpus_hash != first.corpus_hash {
            return Err(Error::contract(format!(
                "`{}` was evaluated on corpus {}, `{}` on {}",
                r.label, r.corpus_hash, first.label, first.corpus_hash
            )));
        }
        if r.seq_len != first.seq_len {
            return Err(Error::contract(format!("`{}` used a different window length", r.label)));
        }
        if reports.iter().filter(|o| o.label == r.label).count() > 1 {
            return Err(Error::contract(format!("duplicate row label `{}`", r.label)));
        }
    }
    let base = reports
        .iter()
        .find(|r| r.label == baseline)
        .ok_or_else(|| Error::contract(format!("baseline `{baseline}` is not among the reports")))?;
    let languages: Vec<Language> = base.languages.keys().copied().collect();
    let rows = reports
        .iter()
        .map(|r| {
            let mut perplexity = BTreeMap::new();
            let mut delta = BTreeMap::new();
            for l in &languages {
                let p = r
                    .languages
                    .get(l)
                    .ok_or_else(|| Error::contract(format!("`{}` has no score for {l}", r.label)))?
                    .perplexity;
                perplexity.insert(*l, p);
                delta.insert(*l, p - base.languages[l].perplexity);
            }
            Ok(ComparisonRow {
                label: r.label.clone(),
                provenance: r.provenance.clone(),
                average: r.average_perplexity,
                delta_average: r.average_perplexity - base.average_perplexity,
                perplexity,
                delta,
            })
        })
        .collect::<Result<_>>()?;
    Ok(ComparisonTable { baseline: baseline.into(), corpus_hash: first.corpus_hash.clone(), languages, rows })
}

impl ComparisonTable {
    /// Markdown rendering: perplexity per language and on average, each
    /// followed by its difference from the baseline.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| model |");
        for l in &self.languages {
            let _ = write!(s, " {l} ({}) |", l.analog());
        }
        s.push_str(" average |\n|---|");
        s.push_str(&"---|".repeat(self.languages.len() + 1));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.label);
            for l in &self.languages {
                let _ = write!(s, " {:.4} ({:+.4}) |", r.perplexity[l], r.delta[l]);
            }
            let _ = writeln!(s, " {:.4} ({:+.4}) |", r.average, r.delta_average);
        }
        s
    }
}

#[cfg(test)]
mod tests;
