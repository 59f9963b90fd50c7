//! The three training stages: dense warm-up, dense→MoE assembly and joint
//! MoE fine-tuning.
//!
//! A typical run trains one dense model per language plus one on the mixed
//! corpus, all starting from a shared base; [`assemble_moe`] then copies
//! their feed-forward weights into the expert slots of a MoE model, and
//! [`train_joint`] fine-tunes the result with the load-balancing term added to
//! the language-modeling loss.

mod assemble;
mod data;
mod optim;
mod recipe;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assemble::{assemble_moe, expert_mapping, AssemblySources};
pub use data::{SequenceSet, Window};
pub use optim::AdamW;
pub use recipe::{run_dense_stage, run_variant, DenseStage, VariantRun};
pub use train::{train_dense, train_joint, train_model, TraceRecord, TrainOutcome};

/// Optimization hyperparameters shared by every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Sequences per step.
    pub batch_size: usize,
    /// Predicted positions per sequence.
    pub seq_len: usize,
    /// Step budget of a dense warm-up run.
    pub warmup_steps: usize,
    /// Step budget of a joint MoE run.
    pub joint_steps: usize,
    /// When set, overrides both step budgets with whole passes over the data.
    pub epochs: Option<usize>,
    pub seed: u64,
    /// Load-balancing coefficient; `None` uses the model config's value.
    pub alpha: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub max_grad_norm: Option<f64>,
    /// Dense warm-up updates only the feed-forward sublayers, keeping every
    /// other parameter equal to the starting checkpoint.
    pub warmup_ffn_only: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            seq_len: 64,
            warmup_steps: 500,
            joint_steps: 500,
            epochs: None,
            seed: 0,
            alpha: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
            warmup_ffn_only: false,
        }
    }
}

impl TrainConfig {
    /// A learning rate of zero is accepted so that frozen runs can be
    /// expressed; everything else must be a usable optimizer setting.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::contract("learning_rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::contract("batch_size and seq_len must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::contract("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::contract("eps must be positive and weight_decay non-negative"));
        }
        if self.alpha.is_some_and(|a| !(a >= 0.0)) {
            return Err(Error::contract("alpha must be non-negative"));
        }
        if self.max_grad_norm.is_some_and(|m| !(m > 0.0)) {
            return Err(Error::contract("max_grad_norm must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Variant::A),
            "B" => Ok(Variant::B),
            "C" => Ok(Variant::C),
            "D" => Ok(Variant::D),
            "E" => Ok(Variant::E),
            _ => Err(Error::contract(format!("unknown ablation variant `{s}` (expected A-E)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedInit {
    MixedCkpt,
    BaseCkpt,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutedInit {
    LanguageCkpts,
    MixedCkpt,
}

/// Where the expert weights of an assembled model come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub variant: Variant,
    pub shared_init: SharedInit,
    pub shared_trainable: bool,
    pub routed_init: RoutedInit,
}

impl AblationConfig {
    /// | variant | routed experts | shared expert |
    /// |---|---|---|
    /// | A | language checkpoints | mixed checkpoint |
    /// | B | language checkpoints | base, trainable |
    /// | C | language checkpoints | base, frozen |
    /// | D | language checkpoints | none |
    /// | E | mixed checkpoint | mixed checkpoint |
    pub fn for_variant(variant: Variant) -> Self {
        let (shared_init, shared_trainable, routed_init) = match variant {
            Variant::A => (SharedInit::MixedCkpt, true, RoutedInit::LanguageCkpts),
            Variant::B => (SharedInit::BaseCkpt, true, RoutedInit::LanguageCkpts),
            Variant::C => (SharedInit::BaseCkpt, false, RoutedInit::LanguageCkpts),
            Variant::D => (SharedInit::None, false, RoutedInit::LanguageCkpts),
            Variant::E => (SharedInit::MixedCkpt, true, RoutedInit::MixedCkpt),
        };
        AblationConfig { variant, shared_init, shared_trainable, routed_init }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.variant {
            Variant::C => !self.shared_trainable && self.shared_init != SharedInit::None,
            Variant::D => self.shared_init == SharedInit::None,
            Variant::E => self.routed_init == RoutedInit::MixedCkpt,
            _ => self.shared_init != SharedInit::None,
        };
        if !ok {
            return Err(Error::contract(format!("inconsistent ablation settings for variant {}", self.variant)));
        }
        Ok(())
    }

    pub fn needs_mixed(&self) -> bool {
        self.shared_init == SharedInit::MixedCkpt || self.routed_init == RoutedInit::MixedCkpt
    }
}

#[cfg(test)]
mod tests;
