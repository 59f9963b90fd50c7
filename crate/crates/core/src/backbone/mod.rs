//! Miniature decoder-only transformer and its checkpoint format.
//!
//! Pre-norm residual blocks with RMS normalization, learned absolute position
//! embeddings, grouped-query causal attention, and a feed-forward sublayer
//! that is either a dense SwiGLU network or the MoE block.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_of_kind, save_checkpoint, Checkpoint, StoredTensor, FORMAT_VERSION, MAGIC,
};
pub use config::{
    dense_prefix, expert_prefix, router_name, shared_gate_bias, shared_gate_weight, shared_prefix, swiglu_names,
    FfnKind, ModelConfig,
};
pub use model::{ForwardTrace, Model, TokenBatch};
