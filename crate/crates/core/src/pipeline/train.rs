use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{BatchOrder, SequenceSet};
use super::optim::{clip_grad_norm, AdamW};
use super::TrainConfig;
use crate::autodiff::Tape;
use crate::backbone::{Checkpoint, FfnKind, Model};
use crate::corpus::Document;
use crate::error::{Error, Result};
use crate::language::Language;
use crate::moe::{aux_loss_on_tape, load_balance_loss, ForwardOptions};

/// One optimizer step as written to the trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based update index.
    pub step: usize,
    pub l_ce: f64,
    /// Mean over MoE layers of `alpha * N * sum_i f_i p_i`; zero for dense runs.
    pub l_aux: f64,
    pub loss: f64,
    /// Dispatch fractions, one row per MoE layer.
    pub f: Vec<Vec<f64>>,
    /// Mean router probabilities, one row per MoE layer.
    pub p: Vec<Vec<f64>>,
    pub alpha: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

impl TraceRecord {
    /// `l_aux` rebuilt from the logged `f`, `p` and `alpha`.
    pub fn recomputed_aux(&self) -> Result<f64> {
        if self.f.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for (f, p) in self.f.iter().zip(&self.p) {
            total += load_balance_loss(f, p, self.alpha)?;
        }
        Ok(total / self.f.len() as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRecord>,
}

/// Runs `steps` AdamW updates on `model`, minimizing cross-entropy plus, for
/// MoE models, `alpha` times the layer-averaged load-balancing loss.
///
/// Batches are drawn from shuffled passes over `data` seeded by `cfg.seed`.
/// A non-finite loss stops training with [`Error::Diverged`] carrying the
/// batch's routing statistics.
pub fn train_model(
    model: &mut Model,
    data: &SequenceSet,
    cfg: &TrainConfig,
    steps: usize,
    alpha: f64,
) -> Result<Vec<TraceRecord>> {
    cfg.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = BatchOrder::new(data.len(), &mut rng);
    let mut opt = AdamW::new(cfg);
    let mut trace = Vec::with_capacity(steps);
    for step in 1..=steps {
        let idx = order.next(cfg.batch_size, &mut rng);
        let (inputs, targets, _) = data.batch(&idx)?;
        // Non-finite values are reported below as a divergence with routing
        // diagnostics instead of failing inside the tape.
        let mut tape = Tape::new().with_finite_checks(false);
        let fwd = match model.forward_on_tape(&mut tape, &inputs, ForwardOptions::default(), true) {
            Err(Error::Numeric { op }) => {
                return Err(Error::Diverged { step, detail: format!("non-finite input to {op} in the forward pass") })
            }
            r => r?,
        };
        let ce = tape.cross_entropy(fwd.logits, &targets)?;
        let (mut f_layers, mut p_layers) = (Vec::new(), Vec::new());
        let mut loss = ce;
        let mut l_aux = 0.0;
        if !fwd.moe.is_empty() {
            let mut aux_sum = None;
            for block in &fwd.moe {
                let (aux, f, p) = aux_loss_on_tape(&mut tape, block.probs, &block.selected, alpha)?;
                aux_sum = Some(match aux_sum {
                    None => aux,
                    Some(acc) => tape.add(acc, aux)?,
                });
                f_layers.push(f);
                p_layers.push(p);
            }
            let aux = tape.scale(aux_sum.expect("at least one MoE layer"), 1.0 / fwd.moe.len() as f64)?;
            l_aux = tape.value(aux).item();
            loss = tape.add(ce, aux)?;
        }
        let l_ce = tape.value(ce).item();
        let total = tape.value(loss).item();
        if !total.is_finite() {
            let dump = serde_json::json!({ "l_ce": l_ce, "f": f_layers, "p": p_layers, "windows": idx });
            return Err(Error::Diverged { step, detail: dump.to_string() });
        }
        tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, var) in &fwd.params {
            if model.is_trainable(name) {
                // A leaf the loss never reached (an expert no token chose) has
                // an exactly zero gradient.
                let g = tape.grad(*var).map_or_else(|| vec![0.0; tape.value(*var).numel()], <[f64]>::to_vec);
                grads.insert(name.clone(), g);
            }
        }
        let grad_norm = clip_grad_norm(&mut grads, cfg.max_grad_norm);
        if !grad_norm.is_finite() {
            let dump = serde_json::json!({ "l_ce": l_ce, "f": f_layers, "p": p_layers, "grad_norm": grad_norm });
            return Err(Error::Diverged { step, detail: dump.to_string() });
        }
        opt.step(&mut model.params, &grads, &model.frozen, cfg.learning_rate)?;
        trace.push(TraceRecord {
            step,
            l_ce,
            l_aux,
            loss: total,
            f: f_layers,
            p: p_layers,
            alpha,
            lr: cfg.learning_rate,
            grad_norm,
        });
    }
    Ok(trace)
}

fn budget(data: &SequenceSet, cfg: &TrainConfig, default_steps: usize) -> usize {
    cfg.epochs.map_or(default_steps, |e| e * data.steps_per_epoch(cfg.batch_size))
}

fn language_label(docs: &[Document]) -> String {
    let mut langs: Vec<Language> = docs.iter().map(|d| d.language).collect();
    langs.sort();
    langs.dedup();
    match langs.as_slice() {
        [one] => format!("{one}({})", one.analog()),
        many => format!("mixed({})", many.iter().map(|l| l.as_str()).collect::<Vec<_>>().join("+")),
    }
}

/// Dense warm-up: continues training a dense checkpoint on `corpus` for
/// `cfg.warmup_steps` steps (or `cfg.epochs` passes).
pub fn train_dense(base: &Checkpoint, corpus: &[Document], cfg: &TrainConfig) -> Result<TrainOutcome> {
    base.expect_kind(FfnKind::Dense)?;
    if corpus.is_empty() {
        return Err(Error::contract("cannot train on an empty corpus"));
    }
    let data = SequenceSet::from_documents(corpus, cfg.seq_len)?;
    let steps = budget(&data, cfg, cfg.warmup_steps);
    let mut model = base.to_model()?;
    let frozen = std::mem::take(&mut model.frozen);
    if cfg.warmup_ffn_only {
        model.frozen = model.params.keys().filter(|k| !k.contains(".ffn.")).cloned().collect();
    }
    let trace = train_model(&mut model, &data, cfg, steps, 0.0)?;
    model.frozen = frozen;
    let scope = if cfg.warmup_ffn_only { ";ffn_only" } else { "" };
    let provenance = format!("warmup:{};steps={steps}{scope};seed={}", language_label(corpus), cfg.seed);
    Ok(TrainOutcome { checkpoint: Checkpoint::from_model(&model, provenance), trace })
}

/// Joint fine-tuning of an assembled MoE checkpoint for `cfg.joint_steps`
/// steps (or `cfg.epochs` passes). Frozen parameters are never updated.
pub fn train_joint(moe: &Checkpoint, corpus: &[Document], cfg: &TrainConfig) -> Result<TrainOutcome> {
    moe.expect_kind(FfnKind::Moe)?;
    if corpus.is_empty() {
        return Err(Error::contract("cannot train on an empty corpus"));
    }
    let data = SequenceSet::from_documents(corpus, cfg.seq_len)?;
    let steps = budget(&data, cfg, cfg.joint_steps);
    let alpha = cfg.alpha.unwrap_or(moe.config.alpha);
    let mut model = moe.to_model()?;
    let trace = train_model(&mut model, &data, cfg, steps, alpha)?;
    let provenance = format!("{}|joint:{};steps={steps};alpha={alpha};seed={}", moe.provenance, language_label(corpus), cfg.seed);
    Ok(TrainOutcome { checkpoint: Checkpoint::from_model(&model, provenance), trace })
}
