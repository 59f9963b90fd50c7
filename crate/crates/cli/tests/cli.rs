use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use fpmoe::corpus::{generate_synthetic_corpus, read_documents, write_documents, Document};
use fpmoe::Language;

const TINY: &str = r#"
[model]
n_layers = 2
d_model = 16
n_q_heads = 4
n_kv_heads = 2
d_ff = 24
context_length = 32

[train]
learning_rate = 0.003
batch_size = 4
seq_len = 16
warmup_steps = 8
joint_steps = 8

[corpus.synth]
repos = 3
files_per_repo = 2
file_len = 200
docs = 4
doc_len = 120

[eval]
seq_len = 16
"#;

fn fpmoe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fpmoe")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = fpmoe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

/// Every whitespace n-gram of `text`.
fn ngrams(text: &str, n: usize) -> BTreeSet<Vec<&str>> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    toks.windows(n).map(<[&str]>::to_vec).collect()
}

#[test]
fn decontaminate_matches_brute_force_oracle() {
    let dir = workspace();
    let d = dir.path();
    let train: Vec<Document> =
        Language::ALL.iter().flat_map(|&l| generate_synthetic_corpus(11, l, 30, 300)).collect();
    // Test documents quote a few training documents and add fresh text.
    let mut test: Vec<Document> = Language::ALL.iter().flat_map(|&l| generate_synthetic_corpus(12, l, 5, 300)).collect();
    for (i, src) in [3usize, 40, 77].iter().enumerate() {
        let toks: Vec<&str> = train[*src].text.split_whitespace().collect();
        test.push(Document {
            doc_id: format!("quote-{i}"),
            language: train[*src].language,
            text: format!("zz {} zz", toks[5..15 + i].join(" ")),
        });
    }
    write_documents(&d.join("train.jsonl"), &train).unwrap();
    write_documents(&d.join("test.jsonl"), &test).unwrap();

    for n in [4, 10] {
        let out = format!("clean{n}.jsonl");
        let ns = n.to_string();
        ok(d, &["corpus", "decontaminate", "--ngram", &ns, "--test", "test.jsonl", "--in", "train.jsonl", "--out", &out]);
        let kept: BTreeSet<String> = read_documents(&d.join(&out)).unwrap().into_iter().map(|x| x.doc_id).collect();

        let test_grams: BTreeSet<Vec<&str>> = test.iter().flat_map(|t| ngrams(&t.text, n)).collect();
        let expected: BTreeSet<String> = train
            .iter()
            .filter(|doc| ngrams(&doc.text, n).is_disjoint(&test_grams))
            .map(|doc| doc.doc_id.clone())
            .collect();
        assert_eq!(kept, expected, "n = {n}");
        assert!(kept.len() < train.len());
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(d.join(format!("{out}.manifest.json"))).unwrap()).unwrap();
        let stage = &manifest["stages"][0];
        assert_eq!(stage["stage"], "decontaminate");
        assert_eq!(stage["removed"].as_array().unwrap().len(), train.len() - kept.len());
    }
}

/// The documented recipe: synthesize, curate, warm up, assemble, train jointly.
fn recipe(d: &Path, variant: &str) -> Vec<u8> {
    let c = ["--config", "tiny.toml"];
    let run = |args: &[&str]| ok(d, &[args, &c[..]].concat());
    run(&["corpus", "synth", "--seed", "1", "--out", "raw"]);
    run(&["corpus", "filter", "--in", "raw", "--out", "filtered"]);
    run(&["corpus", "dedup", "--in", "filtered", "--out", "dedup.jsonl"]);
    run(&["corpus", "synth", "--seed", "2", "--out", "test.jsonl"]);
    run(&["corpus", "decontaminate", "--test", "test.jsonl", "--in", "dedup.jsonl", "--out", "train.jsonl"]);
    run(&["train", "dense", "--data", "train.jsonl", "--steps", "0", "--out", "base.fpm"]);
    for l in ["lang0", "lang1", "lang2"] {
        run(&["train", "dense", "--base", "base.fpm", "--data", "train.jsonl", "--language", l, "--out", &format!("{l}.fpm")]);
    }
    run(&["train", "dense", "--base", "base.fpm", "--data", "train.jsonl", "--out", "mixed.fpm"]);
    run(&[
        "moe", "assemble", "--config", variant, "--base", "base.fpm", "--experts", "lang0.fpm,lang1.fpm,lang2.fpm",
        "--mixed", "mixed.fpm", "--out", "moe.fpm",
    ]);
    run(&["moe", "train", "--in", "moe.fpm", "--data", "train.jsonl", "--out", "final.fpm"]);
    std::fs::read(d.join("final.fpm")).unwrap()
}

#[test]
fn end_to_end_recipe_is_bitwise_reproducible() {
    let (a, b) = (workspace(), workspace());
    let x = recipe(a.path(), "A");
    let y = recipe(b.path(), "A");
    assert_eq!(x, y);
    assert_eq!(&x[..4], b"FPM1");
    let trace = std::fs::read_to_string(a.path().join("final.fpm.trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 8);
    for line in trace.lines() {
        let r: fpmoe::pipeline::TraceRecord = serde_json::from_str(line).unwrap();
        assert!((r.recomputed_aux().unwrap() - r.l_aux).abs() < 1e-12);
    }

    let d = a.path();
    ok(d, &["eval", "ppl", "--config", "tiny.toml", "--ckpt", "mixed.fpm", "--data", "test.jsonl", "--out", "mixed.json"]);
    ok(d, &["eval", "ppl", "--config", "tiny.toml", "--ckpt", "final.fpm", "--data", "test.jsonl", "--out", "a.json"]);
    let md = ok(d, &["eval", "compare", "--report", "mixed.json", "--report", "a.json", "--out", "table.md"]);
    assert_eq!(std::fs::read_to_string(d.join("table.md")).unwrap(), md);
    assert!(md.lines().nth(2).unwrap().starts_with("| mixed |"));
    ok(d, &["eval", "compare", "--report", "a.json", "--report", "mixed.json", "--baseline", "mixed", "--out", "t.json"]);
    let t: fpmoe::eval::ComparisonTable = serde_json::from_slice(&std::fs::read(d.join("t.json")).unwrap()).unwrap();
    assert_eq!(t.baseline, "mixed");
    assert_eq!(t.rows[1].delta_average, 0.0);
}

#[test]
fn variant_d_reports_no_shared_expert() {
    let dir = workspace();
    let d = dir.path();
    recipe(d, "D");
    ok(d, &["eval", "routing", "--config", "tiny.toml", "--ckpt", "final.fpm", "--data", "test.jsonl", "--out", "d.json"]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("d.json")).unwrap()).unwrap();
    let routing = v["routing"].as_object().unwrap();
    assert!(!routing.contains_key("shared_gate_mean"));
    assert_eq!(routing["layers"].as_array().unwrap().len(), 2);

    // A dense checkpoint gets no routing section at all.
    ok(d, &["eval", "routing", "--config", "tiny.toml", "--ckpt", "mixed.fpm", "--data", "test.jsonl", "--out", "m.json"]);
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    assert!(v.get("routing").is_none());
}

#[test]
fn exit_codes() {
    let dir = workspace();
    let d = dir.path();
    let unknown = fpmoe(d, &["corpus", "stats", "--in", "x", "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(1));
    let err = String::from_utf8_lossy(&unknown.stderr);
    assert!(err.contains("Usage:") && err.contains("--frobnicate"), "{err}");
    assert!(unknown.stdout.is_empty());

    assert_eq!(fpmoe(d, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(fpmoe(d, &["--help"]).status.code(), Some(0));
    assert_eq!(fpmoe(d, &["corpus", "synth", "--help"]).status.code(), Some(0));

    // Missing input: I/O error.
    let missing = fpmoe(d, &["eval", "ppl", "--ckpt", "none.fpm", "--data", "none.jsonl", "--out", "r.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(fpmoe(d, &["corpus", "stats", "--in", "nowhere"]).status.code(), Some(2));
    assert_eq!(fpmoe(d, &["corpus", "stats", "--config", "none.toml", "--in", "x.jsonl"]).status.code(), Some(2));

    // Contract errors.
    std::fs::write(d.join("bad.toml"), "[train]\nlr = 1\n").unwrap();
    assert_eq!(fpmoe(d, &["corpus", "synth", "--config", "bad.toml", "--out", "x.jsonl"]).status.code(), Some(1));
    assert_eq!(fpmoe(d, &["corpus", "synth"]).status.code(), Some(1));
    ok(d, &["corpus", "synth", "--config", "tiny.toml", "--out", "docs.jsonl"]);
    ok(d, &["train", "dense", "--config", "tiny.toml", "--data", "docs.jsonl", "--steps", "0", "--out", "b.fpm"]);
    let no_mixed = fpmoe(d, &["moe", "assemble", "--config", "A", "--base", "b.fpm", "--experts", "b.fpm,b.fpm,b.fpm", "--out", "m.fpm"]);
    assert_eq!(no_mixed.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&no_mixed.stderr).contains("mixed"));
    let no_variant = fpmoe(d, &["moe", "assemble", "--config", "tiny.toml", "--base", "b.fpm", "--out", "m.fpm"]);
    assert_eq!(no_variant.status.code(), Some(1));
    let wrong_kind = fpmoe(d, &["moe", "train", "--in", "b.fpm", "--data", "docs.jsonl", "--out", "j.fpm"]);
    assert_eq!(wrong_kind.status.code(), Some(1));
    assert_eq!(fpmoe(d, &["corpus", "filter", "--in", "docs.jsonl", "--out", "f"]).status.code(), Some(1));
    assert!(!d.join("m.fpm").exists() && !d.join("j.fpm").exists() && !d.join("f").exists());
}

#[test]
fn outputs_are_replaced_atomically() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["corpus", "synth", "--config", "tiny.toml", "--out", "raw"]);
    ok(d, &["corpus", "synth", "--config", "tiny.toml", "--seed", "5", "--out", "raw"]);
    ok(d, &["corpus", "synth", "--config", "tiny.toml", "--out", "docs.jsonl"]);
    ok(d, &["corpus", "synth", "--config", "tiny.toml", "--seed", "5", "--out", "docs.jsonl"]);
    let mut names: Vec<String> =
        std::fs::read_dir(d).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["docs.jsonl", "docs.jsonl.manifest.json", "raw", "raw.manifest.json", "tiny.toml"]);
    let docs = read_documents(&d.join("docs.jsonl")).unwrap();
    assert_eq!(docs, Language::ALL.iter().flat_map(|&l| generate_synthetic_corpus(5, l, 4, 120)).collect::<Vec<_>>());
    // A rewritten tree holds exactly the new repositories.
    let tree = fpmoe::corpus::load_repo_tree(&d.join("raw")).unwrap();
    assert_eq!(tree.repos.len(), 9);
    assert_eq!(tree.repos, fpmoe::corpus::load_repo_tree(&d.join("raw")).unwrap().repos);
}

#[test]
fn stats_reports_manifest_and_stage_history() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["corpus", "synth", "--config", "tiny.toml", "--out", "raw"]);
    std::fs::write(d.join("raw/lang0-repo-0000/src/Module0.hs"), format!("{}\n", "x".repeat(1001))).unwrap();
    for f in ["module_0.ml", "module_1.ml"] {
        std::fs::copy(d.join("raw/lang1-repo-0000/src").join(f), d.join("raw/lang1-repo-0001/src").join(f)).unwrap();
    }
    ok(d, &["corpus", "filter", "--in", "raw", "--out", "f"]);
    ok(d, &["corpus", "dedup", "--in", "f", "--out", "dd"]);
    let s = ok(d, &["corpus", "stats", "--in", "dd", "--out", "stats.json"]);
    assert!(s.contains("filter: 18 files in, 17 kept, 1 removed"), "{s}");
    assert!(s.contains("dedup: 9 repos in, 8 kept, 1 removed"), "{s}");
    let m: fpmoe::corpus::CorpusManifest =
        serde_json::from_slice(&std::fs::read(d.join("stats.json")).unwrap()).unwrap();
    assert_eq!(m.stages.len(), 2);
    assert!(m.stages.iter().all(|s| s.reconciles()));
    assert_eq!(m.stages[0].removed[0].reason, "max_line");
    assert_eq!(m.stages[1].removed[0].id, "lang1-repo-0001");
    assert_eq!(m.stages[1].removed[0].reason, "exact_duplicate");
}
