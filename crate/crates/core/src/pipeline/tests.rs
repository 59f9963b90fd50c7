use std::collections::{BTreeMap, BTreeSet};

use super::*;
use crate::autodiff::{Tape, Tensor};
use crate::backbone::*;
use crate::corpus::{generate_synthetic_corpus, Document};
use crate::error::Error;
use crate::language::Language;
use crate::moe::{moe_ffn_forward, ForwardOptions, RoutingMode};

fn micro() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_ff: 24,
        context_length: 32,
        ..ModelConfig::desk_dense()
    }
}

fn fast_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        batch_size: 4,
        seq_len: 16,
        warmup_steps: 20,
        joint_steps: 20,
        ..TrainConfig::default()
    }
}

fn docs(seed: u64, per_lang: usize) -> Vec<Document> {
    Language::ALL
        .iter()
        .flat_map(|&l| generate_synthetic_corpus(seed, l, per_lang, 120))
        .collect()
}

fn base() -> Checkpoint {
    Checkpoint::from_model(&Model::init(&micro(), 1).unwrap(), "init")
}

/// Mean CE of a checkpoint on whole windows, computed directly.
fn held_out_ce(ckpt: &Checkpoint, docs: &[Document], seq_len: usize) -> f64 {
    let model = ckpt.to_model().unwrap();
    let data = SequenceSet::from_documents(docs, seq_len).unwrap();
    let idx: Vec<usize> = (0..data.len()).collect();
    let (inputs, targets, _) = data.batch(&idx).unwrap();
    let mut tape = Tape::new();
    let fwd = model.forward_on_tape(&mut tape, &inputs, ForwardOptions::default(), false).unwrap();
    let ce = tape.cross_entropy(fwd.logits, &targets).unwrap();
    tape.value(ce).item()
}

// ---- optimizer ----

fn one_param(v: f64) -> BTreeMap<String, Tensor> {
    BTreeMap::from([("w".to_string(), Tensor::new([1], vec![v]).unwrap())])
}

#[test]
fn zero_gradients_leave_parameters_unchanged() {
    let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let mut opt = AdamW::new(&cfg);
    let mut params = one_param(0.7);
    params.insert("m".into(), Tensor::new([2, 2], vec![1.0, -2.0, 3.5, 1e-30]).unwrap());
    let before = params.clone();
    let grads = params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
    for _ in 0..10 {
        opt.step(&mut params, &grads, &BTreeSet::new(), 0.1).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn quadratic_converges_to_minimizer() {
    // f(w) = (w - 3)^2, minimizer 3
    let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
    let mut opt = AdamW::new(&cfg);
    let mut params = one_param(0.0);
    for _ in 0..1000 {
        let w = params["w"].data()[0];
        let grads = BTreeMap::from([("w".to_string(), vec![2.0 * (w - 3.0)])]);
        opt.step(&mut params, &grads, &BTreeSet::new(), 1e-2).unwrap();
    }
    let w = params["w"].data()[0];
    assert!((w - 3.0).abs() < 1e-3, "w = {w}");
}

#[test]
fn frozen_parameters_and_missing_gradients() {
    let mut opt = AdamW::new(&TrainConfig::default());
    let mut params = one_param(1.5);
    let grads = BTreeMap::from([("w".to_string(), vec![4.0])]);
    let frozen = BTreeSet::from(["w".to_string()]);
    opt.step(&mut params, &grads, &frozen, 1.0).unwrap();
    assert_eq!(params["w"].data()[0].to_bits(), 1.5f64.to_bits());
    let err = opt.step(&mut params, &BTreeMap::new(), &BTreeSet::new(), 1.0).unwrap_err();
    assert!(matches!(err, Error::Contract(_)));
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_ok());
    assert!(TrainConfig { learning_rate: -1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { beta2: 1.0, ..TrainConfig::default() }.validate().is_err());
    let parsed: TrainConfig = toml::from_str("learning_rate = 0.5\nepochs = 1").unwrap();
    assert_eq!(parsed.learning_rate, 0.5);
    assert_eq!(parsed.batch_size, 32);
    assert!(toml::from_str::<TrainConfig>("learning_rat = 1").is_err());
}

// ---- data ----

#[test]
fn windows_cover_every_transition_once() {
    let d = Document { doc_id: "d".into(), language: Language::Lang2, text: "abcdefghij".into() };
    let set = SequenceSet::from_documents(std::slice::from_ref(&d), 3).unwrap();
    let w: Vec<String> = set.windows().iter().map(|w| w.tokens.iter().map(|&t| t as u8 as char).collect()).collect();
    assert_eq!(w, ["abcd", "defg", "ghij"]);
    let (inputs, targets, langs) = set.batch(&[1]).unwrap();
    assert_eq!(inputs.ids, vec![100, 101, 102]);
    assert_eq!(targets, vec![101, 102, 103]);
    assert_eq!(langs, vec![Language::Lang2; 3]);
    assert!(SequenceSet::from_documents(&[d], 10).is_err());
}

// ---- dense training ----

#[test]
fn zero_step_dense_training_is_identity() {
    let b = base();
    let cfg = TrainConfig { warmup_steps: 0, ..fast_cfg() };
    let out = train_dense(&b, &docs(1, 2), &cfg).unwrap();
    assert!(out.checkpoint.params_bits_eq(&b));
    assert!(out.trace.is_empty());
}

#[test]
fn dense_training_contracts() {
    let b = base();
    assert!(matches!(train_dense(&b, &[], &fast_cfg()), Err(Error::Contract(_))));
    let moe = Checkpoint::from_model(&Model::init(&micro().with_kind(FfnKind::Moe), 0).unwrap(), "m");
    assert!(matches!(train_dense(&moe, &docs(1, 1), &fast_cfg()), Err(Error::Checkpoint(_))));
    let lang0: Vec<Document> = docs(1, 2).into_iter().filter(|d| d.language == Language::Lang0).collect();
    let out = train_dense(&b, &lang0, &fast_cfg()).unwrap();
    assert!(out.checkpoint.provenance.starts_with("warmup:lang0(haskell)"));
    let epochs = TrainConfig { epochs: Some(2), ..fast_cfg() };
    let data = SequenceSet::from_documents(&lang0, 16).unwrap();
    let out = train_dense(&b, &lang0, &epochs).unwrap();
    assert_eq!(out.trace.len(), 2 * data.steps_per_epoch(4));
}

#[test]
fn dense_loss_moving_average_decreases() {
    let cfg = TrainConfig { warmup_steps: 1000, ..fast_cfg() };
    let out = train_dense(&base(), &docs(2, 4), &cfg).unwrap();
    let means: Vec<f64> = out
        .trace
        .chunks(200)
        .map(|c| c.iter().map(|r| r.l_ce).sum::<f64>() / c.len() as f64)
        .collect();
    assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
}

#[test]
fn language_warmup_beats_base_on_held_out_text() {
    let b = base();
    let lang1_train = generate_synthetic_corpus(3, Language::Lang1, 8, 200);
    let lang1_test = generate_synthetic_corpus(4, Language::Lang1, 4, 200);
    let out = train_dense(&b, &lang1_train, &TrainConfig { warmup_steps: 150, ..fast_cfg() }).unwrap();
    let before = held_out_ce(&b, &lang1_test, 16);
    let after = held_out_ce(&out.checkpoint, &lang1_test, 16);
    assert!(after < before, "held-out CE {after} not below {before}");
}

// ---- assembly ----

struct Donors {
    base: Checkpoint,
    languages: Vec<Checkpoint>,
    mixed: Checkpoint,
}

/// Donors with distinct FFN weights, obtained by perturbing the base
/// rather than training so the tests stay fast.
fn donors() -> Donors {
    let base = base();
    let perturbed = |seed: u64, label: &str| {
        let mut m = base.to_model().unwrap();
        let other = Model::init(&micro(), seed).unwrap();
        for (k, t) in m.params.iter_mut() {
            if k.contains(".ffn.") {
                *t = other.params[k].clone();
            }
        }
        Checkpoint::from_model(&m, label)
    };
    Donors {
        languages: (0..3).map(|i| perturbed(10 + i, &format!("warmup:lang{i}"))).collect(),
        mixed: perturbed(20, "warmup:mixed"),
        base,
    }
}

fn assemble(d: &Donors, v: Variant, seed: u64) -> Checkpoint {
    let src = AssemblySources { base: &d.base, languages: &d.languages, mixed: Some(&d.mixed) };
    assemble_moe(&src, &AblationConfig::for_variant(v), &micro(), seed).unwrap()
}

fn hidden(seed: u64) -> Tensor {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    crate::moe::block::normal_tensor(&[7, 16], 1.0, &mut rng)
}

#[test]
fn variant_a_fidelity_to_dense_checkpoints() {
    let d = donors();
    let moe = assemble(&d, Variant::A, 5).to_model().unwrap();
    let h = hidden(1);
    for l in 0..2 {
        let block = moe.moe_block(l).unwrap();
        for i in 0..3 {
            let dense = d.languages[i].to_model().unwrap().dense_ffn(l).unwrap().forward(&h).unwrap();
            let opts = ForwardOptions { routing: RoutingMode::Forced(i), include_shared: false };
            let out = moe_ffn_forward(&h, &block, opts).unwrap();
            assert!(out.h_prime.max_abs_diff(&dense) < 1e-6, "layer {l} expert {i}");
        }
    }
}

#[test]
fn variant_a_copies_every_expert_exactly() {
    let d = donors();
    let moe = assemble(&d, Variant::A, 5);
    for l in 0..2 {
        for i in 0..3 {
            for (from, to) in swiglu_names(&dense_prefix(l)).iter().zip(swiglu_names(&expert_prefix(l, i))) {
                assert!(moe.params[&to].bits_eq(&d.languages[i].params[from]));
            }
        }
        for (from, to) in swiglu_names(&dense_prefix(l)).iter().zip(swiglu_names(&shared_prefix(l))) {
            assert!(moe.params[&to].bits_eq(&d.mixed.params[from]));
        }
        assert!(moe.params[&shared_gate_weight(l)].data.iter().all(|&x| x == 0.0));
        assert_eq!(moe.params[&shared_gate_bias(l)].data, vec![0.0]);
    }
    for name in ["tok_emb", "pos_emb", "lm_head", "final_norm", "layers.1.attn.wq", "layers.0.attn_norm"] {
        assert!(moe.params[name].bits_eq(&d.base.params[name]));
    }
    let r = &moe.params[&router_name(0)].data;
    let std = (r.iter().map(|x| (*x as f64).powi(2)).sum::<f64>() / r.len() as f64).sqrt();
    assert!((0.01..0.03).contains(&std), "router std {std}");
    assert!(moe.provenance.contains("0:lang0(haskell),1:lang1(ocaml),2:lang2(scala)"));
    assert!(moe.frozen.is_empty());
}

#[test]
fn assembly_is_pure() {
    let d = donors();
    for v in Variant::ALL {
        let a = assemble(&d, v, 9);
        assert_eq!(a.to_bytes().unwrap(), assemble(&d, v, 9).to_bytes().unwrap());
    }
    assert!(!assemble(&d, Variant::A, 9).params_bits_eq(&assemble(&d, Variant::A, 10)));
}

#[test]
fn ablation_structures() {
    let d = donors();
    let e = assemble(&d, Variant::E, 1);
    for l in 0..2 {
        for i in 1..3 {
            for (a, b) in swiglu_names(&expert_prefix(l, 0)).iter().zip(swiglu_names(&expert_prefix(l, i))) {
                assert!(e.params[a].bits_eq(&e.params[&b]));
            }
        }
    }
    let dm = assemble(&d, Variant::D, 1);
    assert!(!dm.config.has_shared_expert);
    assert!(dm.params.keys().all(|k| !k.contains("shared")));
    let model = dm.to_model().unwrap();
    let out = moe_ffn_forward(&hidden(2), &model.moe_block(0).unwrap(), ForwardOptions::default()).unwrap();
    assert!(out.o_shared.is_none() && out.lambda.is_none());
    assert!(out.h_prime.data().iter().zip(out.o_routed.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let c = assemble(&d, Variant::C, 1);
    let expect: BTreeSet<String> = (0..2).flat_map(|l| swiglu_names(&shared_prefix(l))).collect();
    assert_eq!(c.frozen, expect);
    for (from, to) in swiglu_names(&dense_prefix(0)).iter().zip(swiglu_names(&shared_prefix(0))) {
        assert!(c.params[&to].bits_eq(&d.base.params[from]));
    }
    assert!(assemble(&d, Variant::B, 1).frozen.is_empty());
}

#[test]
fn assembly_errors() {
    let d = donors();
    let src = AssemblySources { base: &d.base, languages: &d.languages, mixed: None };
    assert!(matches!(
        assemble_moe(&src, &AblationConfig::for_variant(Variant::A), &micro(), 0),
        Err(Error::Contract(_))
    ));
    assert!(assemble_moe(&src, &AblationConfig::for_variant(Variant::B), &micro(), 0).is_ok());

    let short = AssemblySources { base: &d.base, languages: &d.languages[..2], mixed: Some(&d.mixed) };
    assert!(assemble_moe(&short, &AblationConfig::for_variant(Variant::B), &micro(), 0).is_err());

    let mut bad = d.languages.clone();
    let p = bad[1].params.get_mut("layers.1.ffn.up_proj").unwrap();
    p.shape = vec![24, 16];
    let src = AssemblySources { base: &d.base, languages: &bad, mixed: Some(&d.mixed) };
    match assemble_moe(&src, &AblationConfig::for_variant(Variant::A), &micro(), 0) {
        Err(Error::Assembly { layer: 1, param, .. }) => assert_eq!(param, "layers.1.moe.experts.1.up_proj"),
        other => panic!("expected assembly error, got {other:?}"),
    }

    let inconsistent = AblationConfig { shared_trainable: true, ..AblationConfig::for_variant(Variant::C) };
    assert!(inconsistent.validate().is_err());
    let inconsistent = AblationConfig { shared_init: SharedInit::BaseCkpt, ..AblationConfig::for_variant(Variant::D) };
    assert!(inconsistent.validate().is_err());
    assert!("f".parse::<Variant>().is_err());
    assert_eq!("c".parse::<Variant>().unwrap(), Variant::C);
}

// ---- joint training ----

#[test]
fn joint_training_invariants() {
    let d = donors();
    let corpus = docs(5, 3);
    let c = assemble(&d, Variant::C, 2);
    let out = train_joint(&c, &corpus, &TrainConfig { joint_steps: 40, ..fast_cfg() }).unwrap();
    for name in &c.frozen {
        assert!(out.checkpoint.params[name].bits_eq(&c.params[name]), "{name} moved");
    }
    assert!(!out.checkpoint.params_bits_eq(&c));
    for r in &out.trace {
        assert_eq!(r.f.len(), 2);
        assert!((r.recomputed_aux().unwrap() - r.l_aux).abs() < 1e-12);
        assert!((r.l_ce + r.l_aux - r.loss).abs() < 1e-12);
        for (f, p) in r.f.iter().zip(&r.p) {
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
    assert!(out.checkpoint.provenance.contains("joint:mixed(lang0+lang1+lang2)"));
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let d = donors();
    let a = assemble(&d, Variant::A, 2);
    let cfg = TrainConfig { learning_rate: 0.0, joint_steps: 15, ..fast_cfg() };
    let out = train_joint(&a, &docs(6, 2), &cfg).unwrap();
    assert!(out.checkpoint.params_bits_eq(&a));
}

#[test]
fn joint_training_is_deterministic_and_checks_kind() {
    let d = donors();
    let a = assemble(&d, Variant::A, 2);
    let corpus = docs(7, 2);
    let x = train_joint(&a, &corpus, &fast_cfg()).unwrap();
    let y = train_joint(&a, &corpus, &fast_cfg()).unwrap();
    assert_eq!(x.checkpoint.to_bytes().unwrap(), y.checkpoint.to_bytes().unwrap());
    assert_eq!(x.trace, y.trace);
    assert!(matches!(train_joint(&d.base, &corpus, &fast_cfg()), Err(Error::Checkpoint(_))));
    let alpha0 = train_joint(&a, &corpus, &TrainConfig { alpha: Some(0.0), ..fast_cfg() }).unwrap();
    assert!(alpha0.trace.iter().all(|r| r.l_aux == 0.0 && r.alpha == 0.0));
}

#[test]
fn non_finite_loss_aborts_with_routing_dump() {
    let d = donors();
    let mut a = assemble(&d, Variant::A, 2);
    a.params.get_mut("lm_head").unwrap().data[3] = f32::NAN;
    match train_joint(&a, &docs(8, 2), &fast_cfg()) {
        Err(Error::Diverged { step: 1, detail }) => {
            let v: serde_json::Value = serde_json::from_str(&detail).unwrap();
            assert_eq!(v["f"].as_array().unwrap().len(), 2);
            assert_eq!(v["p"][0].as_array().unwrap().len(), 3);
        }
        other => panic!("expected divergence, got {other:?}"),
    }
    let mut r = assemble(&d, Variant::A, 2);
    r.params.get_mut(&router_name(1)).unwrap().data[0] = f32::INFINITY;
    assert!(matches!(train_joint(&r, &docs(8, 2), &fast_cfg()), Err(Error::Diverged { step: 1, .. })));
}

#[test]
fn recipe_helpers_run_end_to_end() {
    let corpus = docs(9, 2);
    let cfg = TrainConfig { warmup_steps: 5, joint_steps: 5, ..fast_cfg() };
    let stage = run_dense_stage(&base(), &corpus, &cfg).unwrap();
    assert_eq!(stage.languages.len(), 3);
    let run = run_variant(&stage, Variant::A, &micro(), &corpus, &cfg).unwrap();
    assert_eq!(run.joint.trace.len(), 5);
    let again = run_variant(&stage, Variant::A, &micro(), &corpus, &cfg).unwrap();
    assert!(again.joint.checkpoint.params_bits_eq(&run.joint.checkpoint));
}
