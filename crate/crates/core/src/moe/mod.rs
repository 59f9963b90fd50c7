//! The mixture-of-experts feed-forward block.
//!
//! Each token's hidden state `h` is scored by a linear router; the `K`
//! highest-probability routed experts are evaluated and summed with their raw
//! softmax probabilities as weights. An optional shared expert runs on every
//! token and is added after scaling by a per-token sigmoid gate:
//!
//! ```text
//! probs     = softmax(W_g h)
//! o_routed  = sum_{i in TopK(probs)} probs_i * E_i(h)
//! lambda    = sigmoid(w_lambda . h + b_lambda)
//! h'        = o_routed + lambda * E_shared(h)
//! ```

pub(crate) mod block;
pub(crate) mod stats;

pub use block::{
    moe_ffn_forward, route, select_top_k, BlockVars, ExpertFfn, ExpertVars, ForwardOptions,
    MoeBlock, MoeBlockOutput, MoeTrace, Router, Routing, RoutingMode, SharedGate,
};
pub use stats::{
    aux_loss_on_tape, compute_routing_stats, entropy, load_balance_loss, RoutingStats,
};

/// Routed experts per block.
pub const DEFAULT_N_EXPERTS: usize = 3;
/// Routed experts activated per token.
pub const DEFAULT_TOP_K: usize = 2;
/// Load-balancing coefficient.
pub const DEFAULT_ALPHA: f64 = 1e-2;
