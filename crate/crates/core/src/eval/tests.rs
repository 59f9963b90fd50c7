use super::*;
use crate::backbone::{Model, ModelConfig};
use crate::corpus::generate_synthetic_corpus;

fn micro(kind: FfnKind) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_q_heads: 4,
        n_kv_heads: 2,
        d_ff: 24,
        context_length: 32,
        ..ModelConfig::desk_dense()
    }
    .with_kind(kind)
}

fn ckpt(kind: FfnKind, seed: u64) -> Checkpoint {
    Checkpoint::from_model(&Model::init(&micro(kind), seed).unwrap(), format!("init:{seed}"))
}

fn docs() -> Vec<Document> {
    Language::ALL.iter().flat_map(|&l| generate_synthetic_corpus(3, l, 3, 70)).collect()
}

fn opts(label: &str) -> EvalOptions {
    EvalOptions { label: label.into(), seq_len: 16, seed: 0 }
}

#[test]
fn windows_score_every_transition_once() {
    let ids: Vec<usize> = (0..10).collect();
    let w = windows(&ids, 4);
    assert_eq!(w, vec![&ids[0..5], &ids[4..9], &ids[8..10]]);
    assert_eq!(w.iter().map(|w| w.len() - 1).sum::<usize>(), 9);
    assert!(windows(&ids[..1], 4).is_empty());
    assert_eq!(windows(&ids[..5], 4), vec![&ids[..5]]);
}

#[test]
fn uniform_model_has_vocabulary_perplexity() {
    let mut c = ckpt(FfnKind::Dense, 0);
    for x in &mut c.params.get_mut("lm_head").unwrap().data {
        *x = 0.0;
    }
    let r = evaluate(&c, &docs(), &opts("zero")).unwrap();
    for (l, e) in &r.languages {
        assert!((e.ce - 256f64.ln()).abs() < 1e-12, "{l}: {}", e.ce);
        assert!((e.perplexity - 256.0).abs() < 1e-9);
        assert_eq!(e.tokens, 3 * 69);
        assert_eq!(e.docs, 3);
    }
    assert!((r.average_perplexity - 256.0).abs() < 1e-9);
    assert!(r.routing.is_none());
}

#[test]
fn ce_matches_direct_per_document_scoring() {
    // Scoring each document as one sequence gives the same total NLL when
    // the document fits the window.
    let c = ckpt(FfnKind::Dense, 4);
    let model = c.to_model().unwrap();
    let d: Vec<Document> = generate_synthetic_corpus(5, Language::Lang1, 4, 17).into_iter().collect();
    let r = evaluate(&c, &d, &opts("x")).unwrap();
    let mut nll = 0.0;
    for doc in &d {
        let ids = doc.token_ids();
        let batch = TokenBatch::new(1, 16, ids[..16].to_vec()).unwrap();
        let logits = model.forward(&batch).unwrap();
        for (t, &target) in ids[1..].iter().enumerate() {
            let row = logits.row(t);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            nll += lse - row[target];
        }
    }
    let e = &r.languages[&Language::Lang1];
    assert!((e.ce - nll / 64.0).abs() < 1e-10);
}

#[test]
fn moe_reports_routing_and_is_deterministic() {
    let c = ckpt(FfnKind::Moe, 1);
    let d = docs();
    let r = evaluate(&c, &d, &opts("moe")).unwrap();
    assert_eq!(r, evaluate(&c, &d, &opts("moe")).unwrap());
    let routing = r.routing.as_ref().unwrap();
    assert_eq!(routing.layers.len(), 2);
    let tokens: u64 = r.languages.values().map(|e| e.tokens).sum();
    assert_eq!(routing.layers[0].tokens, tokens);
    assert_eq!(routing.aggregate.tokens, 2 * tokens);
    assert_eq!(routing.majority_expert.len(), 3);
    assert!(routing.conditional_entropy <= routing.unconditional_entropy + 1e-12);
    let lam = routing.shared_gate_mean.unwrap();
    assert!(lam > 0.0 && lam < 1.0);

    let mut no_shared = micro(FfnKind::Moe);
    no_shared.has_shared_expert = false;
    let d_ckpt = Checkpoint::from_model(&Model::init(&no_shared, 1).unwrap(), "d");
    let r = evaluate(&d_ckpt, &d, &opts("d")).unwrap();
    assert!(r.routing.unwrap().shared_gate_mean.is_none());
}

#[test]
fn report_json_round_trips() {
    let r = evaluate(&ckpt(FfnKind::Moe, 2), &docs(), &opts("m")).unwrap();
    let s = serde_json::to_string(&r).unwrap();
    assert_eq!(serde_json::from_str::<EvalReport>(&s).unwrap(), r);
}

#[test]
fn evaluation_contracts() {
    let c = ckpt(FfnKind::Dense, 0);
    assert!(evaluate(&c, &docs(), &EvalOptions { seq_len: 0, ..opts("x") }).is_err());
    assert!(evaluate(&c, &docs(), &EvalOptions { seq_len: 33, ..opts("x") }).is_err());
    let one = Document { doc_id: "a".into(), language: Language::Lang0, text: "x".into() };
    assert!(evaluate(&c, &[one], &opts("x")).is_err());
    assert!(evaluate(&c, &[], &opts("x")).is_err());
}

#[test]
fn comparison_table() {
    let d = docs();
    let a = evaluate(&ckpt(FfnKind::Dense, 0), &d, &opts("dense")).unwrap();
    let b = evaluate(&ckpt(FfnKind::Moe, 0), &d, &opts("moe")).unwrap();
    let t = compare(&[a.clone(), b.clone()], "dense").unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!(t.rows[0].delta.values().all(|&x| x == 0.0) && t.rows[0].delta_average == 0.0);
    for l in Language::ALL {
        let want = b.languages[&l].perplexity - a.languages[&l].perplexity;
        assert_eq!(t.rows[1].delta[&l], want);
    }
    let md = t.to_markdown();
    assert_eq!(md.lines().count(), 4);
    assert!(md.contains("| dense |") && md.contains("lang2 (scala)"));

    assert!(compare(&[], "dense").is_err());
    assert!(compare(std::slice::from_ref(&a), "moe").is_err());
    assert!(compare(&[a.clone(), a.clone()], "dense").is_err());
    let other = evaluate(&ckpt(FfnKind::Moe, 0), &d[1..], &opts("moe")).unwrap();
    assert!(compare(&[a.clone(), other], "dense").is_err());
    let long = evaluate(&ckpt(FfnKind::Moe, 0), &d, &EvalOptions { seq_len: 8, ..opts("moe") }).unwrap();
    assert!(compare(&[a, long], "dense").is_err());
}
