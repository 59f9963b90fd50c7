use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::language::Language;

/// Dispatch statistics of one block over a batch of tokens.
///
/// `f[i]` is the fraction of Top-K slots assigned to expert `i`
/// (membership count over `tokens * k`), `p[i]` the mean router probability.
/// Raw counts and sums are kept so shards merge exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub tokens: u64,
    pub top_k: usize,
    pub dispatch_counts: Vec<u64>,
    pub prob_sums: Vec<f64>,
    /// Top-1 assignment counts per language.
    pub per_language: BTreeMap<Language, Vec<u64>>,
}

impl RoutingStats {
    pub fn empty(n_experts: usize, top_k: usize) -> Self {
        RoutingStats {
            f: vec![0.0; n_experts],
            p: vec![0.0; n_experts],
            tokens: 0,
            top_k,
            dispatch_counts: vec![0; n_experts],
            prob_sums: vec![0.0; n_experts],
            per_language: BTreeMap::new(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.f.len()
    }

    fn refresh(&mut self) {
        let slots = (self.tokens * self.top_k as u64) as f64;
        let tokens = self.tokens as f64;
        for i in 0..self.n_experts() {
            self.f[i] = if slots > 0.0 { self.dispatch_counts[i] as f64 / slots } else { 0.0 };
            self.p[i] = if tokens > 0.0 { self.prob_sums[i] / tokens } else { 0.0 };
        }
    }

    /// Combines statistics from two disjoint token sets.
    pub fn merge(&self, other: &RoutingStats) -> Result<RoutingStats> {
        if self.n_experts() != other.n_experts() || self.top_k != other.top_k {
            return Err(Error::contract("merging routing stats with different expert layouts"));
        }
        let mut out = self.clone();
        out.tokens += other.tokens;
        for i in 0..out.n_experts() {
            out.dispatch_counts[i] += other.dispatch_counts[i];
            out.prob_sums[i] += other.prob_sums[i];
        }
        for (lang, counts) in &other.per_language {
            let slot = out.per_language.entry(*lang).or_insert_with(|| vec![0; counts.len()]);
            slot.iter_mut().zip(counts).for_each(|(a, b)| *a += b);
        }
        out.refresh();
        Ok(out)
    }

    /// `alpha * N * sum_i f_i p_i`.
    pub fn aux_loss(&self, alpha: f64) -> Result<f64> {
        if self.tokens == 0 {
            return Err(Error::contract("load-balancing loss over zero tokens"));
        }
        load_balance_loss(&self.f, &self.p, alpha)
    }

    /// Top-1 counts pooled over languages.
    pub fn top1_counts(&self) -> Vec<u64> {
        let mut total = vec![0; self.n_experts()];
        for counts in self.per_language.values() {
            total.iter_mut().zip(counts).for_each(|(a, b)| *a += b);
        }
        total
    }

    /// Entropy of the pooled Top-1 expert distribution, in nats.
    pub fn unconditional_entropy(&self) -> f64 {
        entropy(&self.top1_counts())
    }

    /// `H(expert | language)`: language-weighted mean of per-language entropies.
    pub fn conditional_entropy(&self) -> f64 {
        let total: u64 = self.per_language.values().map(|c| c.iter().sum::<u64>()).sum();
        if total == 0 {
            return 0.0;
        }
        self.per_language
            .values()
            .map(|c| c.iter().sum::<u64>() as f64 / total as f64 * entropy(c))
            .sum()
    }

    /// Most frequent Top-1 expert for a language (lowest index on ties).
    pub fn majority_expert(&self, lang: Language) -> Option<usize> {
        let counts = self.per_language.get(&lang)?;
        if counts.iter().all(|&c| c == 0) {
            return None;
        }
        let max = *counts.iter().max()?;
        counts.iter().position(|&c| c == max)
    }
}

/// Shannon entropy (nats) of a histogram.
pub fn entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum()
}

/// `alpha * N * sum_i f_i p_i` for `N = f.len()` routed experts.
pub fn load_balance_loss(f: &[f64], p: &[f64], alpha: f64) -> Result<f64> {
    if f.len() != p.len() || f.is_empty() {
        return Err(Error::Shape { op: "load_balance_loss", lhs: vec![f.len()], rhs: vec![p.len()] });
    }
    let n = f.len() as f64;
    Ok(alpha * n * f.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
}

/// Builds [`RoutingStats`] from router output of one batch.
///
/// `language_tags` holds one tag per token.
pub fn compute_routing_stats<S: AsRef<str>>(
    full_probs: &Tensor,
    selected_indices: &[Vec<usize>],
    language_tags: &[S],
) -> Result<RoutingStats> {
    let langs = language_tags
        .iter()
        .map(|s| s.as_ref().parse::<Language>())
        .collect::<Result<Vec<_>>>()?;
    stats_from_langs(full_probs, selected_indices, &langs)
}

pub(crate) fn stats_from_langs(
    full_probs: &Tensor,
    selected_indices: &[Vec<usize>],
    langs: &[Language],
) -> Result<RoutingStats> {
    let (n, experts) = full_probs.dims2()?;
    if selected_indices.len() != n || langs.len() != n {
        return Err(Error::contract(format!(
            "{n} tokens but {} selections and {} language tags",
            selected_indices.len(),
            langs.len()
        )));
    }
    let top_k = selected_indices.first().map_or(1, Vec::len);
    let mut stats = RoutingStats::empty(experts, top_k);
    stats.tokens = n as u64;
    for t in 0..n {
        let sel = &selected_indices[t];
        if sel.len() != top_k {
            return Err(Error::contract("ragged Top-K selection"));
        }
        for &e in sel {
            if e >= experts {
                return Err(Error::Index { what: "experts", index: e, bound: experts });
            }
            stats.dispatch_counts[e] += 1;
        }
        for (acc, p) in stats.prob_sums.iter_mut().zip(full_probs.row(t)) {
            *acc += p;
        }
        let hist = stats.per_language.entry(langs[t]).or_insert_with(|| vec![0; experts]);
        hist[sel[0]] += 1;
    }
    stats.refresh();
    Ok(stats)
}

/// Differentiable load-balancing loss for one block.
///
/// Dispatch fractions are frozen constants; only the mean probabilities carry
/// gradient. Returns the loss node together with the `f` and `p` used.
pub fn aux_loss_on_tape(
    tape: &mut Tape,
    probs: Var,
    selected: &[Vec<usize>],
    alpha: f64,
) -> Result<(Var, Vec<f64>, Vec<f64>)> {
    let (n, experts) = tape.value(probs).dims2()?;
    if n == 0 || selected.is_empty() {
        return Err(Error::contract("load-balancing loss over zero tokens"));
    }
    let k = selected[0].len();
    let mut counts = vec![0u64; experts];
    for sel in selected {
        for &e in sel {
            counts[e] += 1;
        }
    }
    let slots = (n * k) as f64;
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / slots).collect();
    let p_var = tape.mean_rows(probs)?;
    let p = tape.value(p_var).data().to_vec();
    let f_var = tape.constant(Tensor::new([1, experts], f.clone())?);
    let prod = tape.mul(p_var, f_var)?;
    let s = tape.sum(prod)?;
    let loss = tape.scale(s, alpha * experts as f64)?;
    Ok((loss, f, p))
}
