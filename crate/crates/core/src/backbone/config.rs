use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnKind {
    Dense,
    Moe,
}

impl FfnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FfnKind::Dense => "dense",
            FfnKind::Moe => "moe",
        }
    }
}

/// Architecture hyperparameters of the decoder.
///
/// `n_routed_experts`, `top_k`, `alpha` and `has_shared_expert` are ignored
/// when `ffn_kind` is [`FfnKind::Dense`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub n_routed_experts: usize,
    pub top_k: usize,
    pub alpha: f64,
    pub has_shared_expert: bool,
    pub ffn_kind: FfnKind,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_dense()
    }
}

impl ModelConfig {
    /// Default desk-scale dense model.
    pub fn desk_dense() -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_ff: 128,
            vocab_size: 256,
            context_length: 256,
            n_routed_experts: 3,
            top_k: 2,
            alpha: 0.01,
            has_shared_expert: true,
            ffn_kind: FfnKind::Dense,
            norm_eps: 1e-5,
        }
    }

    /// The desk-scale dense model with its FFN replaced by the MoE block.
    pub fn desk_moe() -> Self {
        ModelConfig { ffn_kind: FfnKind::Moe, ..ModelConfig::desk_dense() }
    }

    /// Two-layer, 32-wide model used by the fast experiments.
    pub fn tiny_dense() -> Self {
        ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_q_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            context_length: 64,
            ..ModelConfig::desk_dense()
        }
    }

    /// Shape of the 28-layer production configuration (12 query / 2 KV
    /// heads, 3 routed + 1 shared expert, 32K context). Widths follow the
    /// 1.5B-class backbone it is built on.
    pub fn production_4x1_5b() -> Self {
        ModelConfig {
            n_layers: 28,
            d_model: 1536,
            n_q_heads: 12,
            n_kv_heads: 2,
            d_ff: 8960,
            vocab_size: 151_936,
            context_length: 32_768,
            ffn_kind: FfnKind::Moe,
            ..ModelConfig::desk_dense()
        }
    }

    /// Shape of the 36-layer production configuration (16 query / 2 KV heads).
    pub fn production_4x3b() -> Self {
        ModelConfig {
            n_layers: 36,
            d_model: 2048,
            n_q_heads: 16,
            n_kv_heads: 2,
            d_ff: 11_008,
            vocab_size: 151_936,
            context_length: 32_768,
            ffn_kind: FfnKind::Moe,
            ..ModelConfig::desk_dense()
        }
    }

    pub fn with_kind(&self, kind: FfnKind) -> Self {
        ModelConfig { ffn_kind: kind, ..self.clone() }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_q_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("context_length", self.context_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::contract(format!(
                "n_q_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        if !self.d_model.is_multiple_of(self.n_q_heads) {
            return Err(Error::contract(format!(
                "d_model ({}) must be divisible by n_q_heads ({})",
                self.d_model, self.n_q_heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::contract("norm_eps must be positive"));
        }
        if self.ffn_kind == FfnKind::Moe {
            if self.n_routed_experts == 0 || self.top_k == 0 || self.top_k > self.n_routed_experts {
                return Err(Error::contract(format!(
                    "need 1 <= top_k ({}) <= n_routed_experts ({})",
                    self.top_k, self.n_routed_experts
                )));
            }
            if !(self.alpha >= 0.0) {
                return Err(Error::contract("alpha must be non-negative"));
            }
        }
        Ok(())
    }

    /// Every parameter name with its shape, in checkpoint order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff, hd) = (self.d_model, self.d_ff, self.head_dim());
        let mut out = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.context_length, d]),
            ("final_norm".to_string(), vec![d]),
            ("lm_head".to_string(), vec![d, self.vocab_size]),
        ];
        let swiglu = |prefix: String, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{prefix}.gate_proj"), vec![d, ff]));
            out.push((format!("{prefix}.up_proj"), vec![d, ff]));
            out.push((format!("{prefix}.down_proj"), vec![ff, d]));
        };
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn_norm"), vec![d]));
            out.push((format!("{p}.attn.wq"), vec![d, self.n_q_heads * hd]));
            out.push((format!("{p}.attn.wk"), vec![d, self.n_kv_heads * hd]));
            out.push((format!("{p}.attn.wv"), vec![d, self.n_kv_heads * hd]));
            out.push((format!("{p}.attn.wo"), vec![self.n_q_heads * hd, d]));
            out.push((format!("{p}.ffn_norm"), vec![d]));
            match self.ffn_kind {
                FfnKind::Dense => swiglu(dense_prefix(l), &mut out),
                FfnKind::Moe => {
                    out.push((router_name(l), vec![self.n_routed_experts, d]));
                    for i in 0..self.n_routed_experts {
                        swiglu(expert_prefix(l, i), &mut out);
                    }
                    if self.has_shared_expert {
                        swiglu(shared_prefix(l), &mut out);
                        out.push((shared_gate_weight(l), vec![d]));
                        out.push((shared_gate_bias(l), vec![1]));
                    }
                }
            }
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

pub fn dense_prefix(layer: usize) -> String {
    format!("layers.{layer}.ffn")
}

pub fn expert_prefix(layer: usize, expert: usize) -> String {
    format!("layers.{layer}.moe.experts.{expert}")
}

pub fn shared_prefix(layer: usize) -> String {
    format!("layers.{layer}.moe.shared")
}

pub fn router_name(layer: usize) -> String {
    format!("layers.{layer}.moe.router")
}

pub fn shared_gate_weight(layer: usize) -> String {
    format!("layers.{layer}.moe.shared_gate.weight")
}

pub fn shared_gate_bias(layer: usize) -> String {
    format!("layers.{layer}.moe.shared_gate.bias")
}

/// Projection names of a SwiGLU block under `prefix`.
pub fn swiglu_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.gate_proj"),
        format!("{prefix}.up_proj"),
        format!("{prefix}.down_proj"),
    ]
}
