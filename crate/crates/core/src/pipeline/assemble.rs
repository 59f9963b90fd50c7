use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AblationConfig, RoutedInit, SharedInit};
use crate::backbone::*;
use crate::error::{Error, Result};
use crate::language::Language;
use crate::moe::block::normal_tensor;

/// Dense checkpoints an MoE model is assembled from.
#[derive(Debug, Clone, Copy)]
pub struct AssemblySources<'a> {
    /// Supplies attention, norms, embeddings and the output head.
    pub base: &'a Checkpoint,
    /// Language checkpoint `i` becomes routed expert `i`.
    pub languages: &'a [Checkpoint],
    pub mixed: Option<&'a Checkpoint>,
}

/// `0:lang0(haskell),1:lang1(ocaml),2:lang2(scala)` for `n` experts.
pub fn expert_mapping(n: usize) -> String {
    (0..n)
        .map(|i| match Language::from_index(i) {
            Some(l) => format!("{i}:{l}({})", l.analog()),
            None => format!("{i}:?"),
        })
        .collect::<Vec<_>>()
        .join(",")
}

/// Builds a MoE checkpoint from dense donors.
///
/// `model_cfg` supplies the routing hyperparameters (`n_routed_experts`,
/// `top_k`, `alpha`); its architecture must match the base checkpoint. Its
/// `ffn_kind` and `has_shared_expert` are set from the ablation. The router
/// is drawn from normal(0, 0.02) seeded by `seed` and the shared gate starts
/// at zero, so every token begins with a shared-expert weight of 0.5.
pub fn assemble_moe(
    src: &AssemblySources<'_>,
    ablation: &AblationConfig,
    model_cfg: &ModelConfig,
    seed: u64,
) -> Result<Checkpoint> {
    ablation.validate()?;
    let base = src.base;
    base.expect_kind(FfnKind::Dense)?;
    let mut cfg = model_cfg.clone();
    cfg.ffn_kind = FfnKind::Moe;
    cfg.has_shared_expert = ablation.shared_init != SharedInit::None;
    cfg.validate()?;
    let b = &base.config;
    let arch = |c: &ModelConfig| {
        (c.n_layers, c.d_model, c.n_q_heads, c.n_kv_heads, c.d_ff, c.vocab_size, c.context_length)
    };
    if arch(&cfg) != arch(b) {
        return Err(Error::contract("MoE config architecture differs from the base checkpoint"));
    }

    let mixed = if ablation.needs_mixed() {
        let m = src.mixed.ok_or_else(|| {
            Error::contract(format!("variant {} needs a mixed-corpus checkpoint", ablation.variant))
        })?;
        m.expect_kind(FfnKind::Dense)?;
        Some(m)
    } else {
        None
    };
    let routed_donors: Vec<&Checkpoint> = match ablation.routed_init {
        RoutedInit::MixedCkpt => vec![mixed.expect("checked above"); cfg.n_routed_experts],
        RoutedInit::LanguageCkpts => {
            if src.languages.len() != cfg.n_routed_experts {
                return Err(Error::contract(format!(
                    "{} routed experts need as many language checkpoints, got {}",
                    cfg.n_routed_experts,
                    src.languages.len()
                )));
            }
            for c in src.languages {
                c.expect_kind(FfnKind::Dense)?;
            }
            src.languages.iter().collect()
        }
    };
    let shared_donor = match ablation.shared_init {
        SharedInit::MixedCkpt => mixed,
        SharedInit::BaseCkpt => Some(base),
        SharedInit::None => None,
    };

    let expected: BTreeMap<String, Vec<usize>> = cfg.param_shapes().into_iter().collect();
    let mut params = BTreeMap::new();
    let mut frozen = BTreeSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let copy = |layer: usize, donor: &Checkpoint, from: &str, to: String, params: &mut BTreeMap<_, _>| {
        let slot = &expected[&to];
        let t: &StoredTensor = donor.params.get(from).ok_or_else(|| Error::Assembly {
            layer,
            param: to.clone(),
            reason: format!("donor `{}` has no `{from}`", donor.provenance),
        })?;
        if &t.shape != slot {
            return Err(Error::Assembly {
                layer,
                param: to.clone(),
                reason: format!("donor shape {:?} does not fit slot {:?}", t.shape, slot),
            });
        }
        params.insert(to, t.clone());
        Ok::<(), Error>(())
    };

    for (name, shape) in &expected {
        if !name.contains(".moe.") {
            let t = base.params.get(name).ok_or_else(|| Error::contract(format!("base lacks `{name}`")))?;
            if &t.shape != shape {
                return Err(Error::contract(format!("base `{name}` has shape {:?}", t.shape)));
            }
            params.insert(name.clone(), t.clone());
        }
    }
    for l in 0..cfg.n_layers {
        let dense = swiglu_names(&dense_prefix(l));
        for (i, donor) in routed_donors.iter().enumerate() {
            for (from, to) in dense.iter().zip(swiglu_names(&expert_prefix(l, i))) {
                copy(l, donor, from, to, &mut params)?;
            }
        }
        if let Some(donor) = shared_donor {
            for (from, to) in dense.iter().zip(swiglu_names(&shared_prefix(l))) {
                if !ablation.shared_trainable {
                    frozen.insert(to.clone());
                }
                copy(l, donor, from, to, &mut params)?;
            }
            let d = cfg.d_model;
            params.insert(shared_gate_weight(l), StoredTensor { shape: vec![d], data: vec![0.0; d] });
            params.insert(shared_gate_bias(l), StoredTensor { shape: vec![1], data: vec![0.0] });
        }
        let router = normal_tensor(&[cfg.n_routed_experts, cfg.d_model], 0.02, &mut rng);
        params.insert(router_name(l), StoredTensor::from_tensor(&router));
    }

    let routed = match ablation.routed_init {
        RoutedInit::LanguageCkpts => expert_mapping(cfg.n_routed_experts),
        RoutedInit::MixedCkpt => "all:mixed".to_string(),
    };
    let shared = match ablation.shared_init {
        SharedInit::MixedCkpt => "mixed",
        SharedInit::BaseCkpt if ablation.shared_trainable => "base",
        SharedInit::BaseCkpt => "base(frozen)",
        SharedInit::None => "none",
    };
    let ckpt = Checkpoint {
        kind: FfnKind::Moe,
        provenance: format!("assembled:config{};experts={routed};shared={shared};seed={seed}", ablation.variant),
        config: cfg,
        params,
        frozen,
    };
    ckpt.validate()?;
    Ok(ckpt)
}
