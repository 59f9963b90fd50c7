use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::*;
use crate::autodiff::{AttentionDims, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::moe::block::normal_tensor;
use crate::moe::{BlockVars, ExpertFfn, ExpertVars, ForwardOptions, MoeBlock, MoeTrace, Router, SharedGate};

/// `batch` sequences of `seq_len` token ids, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq_len: usize, ids: Vec<usize>) -> Result<Self> {
        if batch == 0 || seq_len == 0 || ids.len() != batch * seq_len {
            return Err(Error::contract(format!(
                "token batch {batch}x{seq_len} with {} ids",
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, seq_len, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq_len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq_len) {
            return Err(Error::contract("ragged token rows"));
        }
        TokenBatch::new(rows.len(), seq_len, rows.concat())
    }
}

/// Decoder-only transformer parameters plus trainability flags.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
    /// Parameters excluded from optimizer updates.
    pub frozen: BTreeSet<String>,
}

/// Tape handles produced by [`Model::forward_on_tape`].
#[derive(Debug)]
pub struct ForwardTrace {
    /// `[batch*seq_len, vocab]`
    pub logits: Var,
    pub params: BTreeMap<String, Var>,
    /// One entry per MoE layer.
    pub moe: Vec<MoeTrace>,
}

impl Model {
    /// Randomly initialized model: normal(0, 0.02) matrices, residual output
    /// projections scaled by `1/sqrt(2 * n_layers)`, unit norm weights, and a
    /// neutral shared-expert gate.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        let mut params = BTreeMap::new();
        for (name, shape) in config.param_shapes() {
            let t = if name.ends_with("norm") {
                Tensor::full(shape, 1.0)
            } else if name.contains("shared_gate") {
                Tensor::zeros(shape)
            } else if name.ends_with(".wo") || name.ends_with("down_proj") {
                normal_tensor(&shape, resid_std, &mut rng)
            } else {
                normal_tensor(&shape, 0.02, &mut rng)
            };
            params.insert(name, t);
        }
        Ok(Model { config: config.clone(), params, frozen: BTreeSet::new() })
    }

    /// Checks that the parameter set is exactly what the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.param_shapes();
        if expected.len() != self.params.len() {
            return Err(Error::contract(format!(
                "config implies {} parameters, model has {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in expected {
            match self.params.get(&name) {
                None => return Err(Error::contract(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape { op: "model", lhs: t.shape().to_vec(), rhs: shape })
                }
                _ => {}
            }
        }
        for f in &self.frozen {
            if !self.params.contains_key(f) {
                return Err(Error::contract(format!("frozen parameter `{f}` does not exist")));
            }
        }
        Ok(())
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.contains(name)
    }

    /// The dense FFN of `layer` as a standalone expert.
    pub fn dense_ffn(&self, layer: usize) -> Result<ExpertFfn> {
        self.swiglu(&dense_prefix(layer))
    }

    pub fn swiglu(&self, prefix: &str) -> Result<ExpertFfn> {
        let [g, u, d] = swiglu_names(prefix);
        Ok(ExpertFfn {
            gate_proj: self.param(&g)?.clone(),
            up_proj: self.param(&u)?.clone(),
            down_proj: self.param(&d)?.clone(),
        })
    }

    /// The MoE block of `layer` as a standalone value.
    pub fn moe_block(&self, layer: usize) -> Result<MoeBlock> {
        let c = &self.config;
        if c.ffn_kind != FfnKind::Moe {
            return Err(Error::contract("dense model has no MoE block"));
        }
        let experts = (0..c.n_routed_experts)
            .map(|i| self.swiglu(&expert_prefix(layer, i)))
            .collect::<Result<Vec<_>>>()?;
        let shared = if c.has_shared_expert {
            let gate = SharedGate {
                weight: self.param(&shared_gate_weight(layer))?.clone(),
                bias: self.param(&shared_gate_bias(layer))?.clone(),
            };
            Some((self.swiglu(&shared_prefix(layer))?, gate))
        } else {
            None
        };
        let router = Router::new(self.param(&router_name(layer))?.clone(), c.top_k)?;
        Ok(MoeBlock { experts, shared, router })
    }

    /// Records the forward pass on `tape`.
    ///
    /// With `track_grads`, every non-frozen parameter becomes a
    /// gradient-carrying leaf.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        tokens: &TokenBatch,
        opts: ForwardOptions,
        track_grads: bool,
    ) -> Result<ForwardTrace> {
        let c = &self.config;
        if tokens.seq_len > c.context_length {
            return Err(Error::contract(format!(
                "sequence length {} exceeds context length {}",
                tokens.seq_len, c.context_length
            )));
        }
        let vars: BTreeMap<String, Var> = self
            .params
            .iter()
            .map(|(name, t)| {
                let rg = track_grads && self.is_trainable(name);
                (name.clone(), tape.leaf(t.clone().with_requires_grad(rg)))
            })
            .collect();
        let p = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
        };

        let positions: Vec<usize> = (0..tokens.batch).flat_map(|_| 0..tokens.seq_len).collect();
        let tok = tape.embedding(p("tok_emb")?, &tokens.ids)?;
        let pos = tape.embedding(p("pos_emb")?, &positions)?;
        let mut x = tape.add(tok, pos)?;
        let dims = AttentionDims {
            batch: tokens.batch,
            seq_len: tokens.seq_len,
            n_q_heads: c.n_q_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim(),
        };
        let swiglu_vars = |prefix: &str| -> Result<ExpertVars> {
            let [g, u, d] = swiglu_names(prefix);
            Ok(ExpertVars { gate: p(&g)?, up: p(&u)?, down: p(&d)? })
        };

        let mut moe = Vec::new();
        for l in 0..c.n_layers {
            let pre = format!("layers.{l}");
            let a = tape.rms_norm(x, p(&format!("{pre}.attn_norm"))?, c.norm_eps)?;
            let q = tape.matmul(a, p(&format!("{pre}.attn.wq"))?)?;
            let k = tape.matmul(a, p(&format!("{pre}.attn.wk"))?)?;
            let v = tape.matmul(a, p(&format!("{pre}.attn.wv"))?)?;
            let att = tape.causal_attention(q, k, v, dims)?;
            let o = tape.matmul(att, p(&format!("{pre}.attn.wo"))?)?;
            x = tape.add(x, o)?;

            let h = tape.rms_norm(x, p(&format!("{pre}.ffn_norm"))?, c.norm_eps)?;
            let ffn = match c.ffn_kind {
                FfnKind::Dense => swiglu_vars(&dense_prefix(l))?.forward(tape, h)?,
                FfnKind::Moe => {
                    let block = BlockVars {
                        experts: (0..c.n_routed_experts)
                            .map(|i| swiglu_vars(&expert_prefix(l, i)))
                            .collect::<Result<_>>()?,
                        shared: if c.has_shared_expert {
                            Some((
                                swiglu_vars(&shared_prefix(l))?,
                                p(&shared_gate_weight(l))?,
                                p(&shared_gate_bias(l))?,
                            ))
                        } else {
                            None
                        },
                        router: p(&router_name(l))?,
                        top_k: c.top_k,
                    };
                    let tr = block.forward(tape, h, opts)?;
                    let out = tr.h_prime;
                    moe.push(tr);
                    out
                }
            };
            x = tape.add(x, ffn)?;
        }
        let xf = tape.rms_norm(x, p("final_norm")?, c.norm_eps)?;
        let logits = tape.matmul(xf, p("lm_head")?)?;
        Ok(ForwardTrace { logits, params: vars, moe })
    }

    /// Logits shaped `[batch, seq_len, vocab]`.
    pub fn forward(&self, tokens: &TokenBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let tr = self.forward_on_tape(&mut tape, tokens, ForwardOptions::default(), false)?;
        tape.value(tr.logits)
            .clone()
            .reshape([tokens.batch, tokens.seq_len, self.config.vocab_size])
    }
}
