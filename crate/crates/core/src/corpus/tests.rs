use std::collections::{BTreeMap, BTreeSet};

use super::*;
use crate::language::Language;

fn file(repo: &str, path: &str, text: &str) -> SourceFile {
    SourceFile::new(repo, path, Language::Lang0, text)
}

fn repo(id: &str, texts: &[String]) -> Repository {
    Repository {
        repo_id: id.into(),
        files: texts.iter().enumerate().map(|(i, t)| file(id, &format!("f{i:02}.hs"), t)).collect(),
    }
}

// ---- tokenizer ----

#[test]
fn tokenizer_round_trips_bytes() {
    assert!(tokenize("").is_empty());
    assert_eq!(detokenize(&[]).unwrap(), "");
    for s in ["plain ascii", "λx → x ∘ f", "日本語 and emoji 🦀"] {
        let ids = tokenize(s);
        assert_eq!(ids.len(), s.len());
        assert_eq!(detokenize(&ids).unwrap(), s);
    }
    assert!(matches!(detokenize(&[256]), Err(Error::Index { .. })));
    assert!(matches!(detokenize(&[0xff]), Err(Error::Format { .. })));
}

// ---- filter ----

fn decide(text: &str) -> FilterDecision {
    filter_file(&file("r", "a.hs", text), &FilterConfig::default())
}

#[test]
fn filter_boundaries() {
    assert_eq!(decide(&"a".repeat(1001)), FilterDecision::Drop(DropReason::MaxLine));
    assert_eq!(decide(&format!("{}\n{}", "a".repeat(50), "b".repeat(50))), FilterDecision::Keep);
    // average exactly 100 is kept, the limit is strict
    assert_eq!(decide(&format!("{}\n{}", "a".repeat(60), "b".repeat(140))), FilterDecision::Keep);
    assert_eq!(decide(&format!("{}\n{}", "a".repeat(100), "b".repeat(101))), FilterDecision::Drop(DropReason::AvgLine));
    // the longest line may reach 1000 exactly when the average stays low
    let ok = format!("{}\n{}", "a".repeat(1000), "\n".repeat(20));
    assert_eq!(decide(&ok), FilterDecision::Keep);
    let bad = format!("{}\n{}", "a".repeat(1001), "\n".repeat(20));
    assert_eq!(decide(&bad), FilterDecision::Drop(DropReason::MaxLine));
}

#[test]
fn filter_counts_scalars_and_ignores_line_breaks() {
    // 100 two-byte scalars per line: 200 bytes, but an average of exactly 100.
    let line = "é".repeat(100);
    assert_eq!(decide(&format!("{line}\r\n{line}\n")), FilterDecision::Keep);
    assert_eq!(decide(&format!("{line}é")), FilterDecision::Drop(DropReason::AvgLine));
}

#[test]
fn filter_special_files() {
    assert_eq!(decide(""), FilterDecision::Drop(DropReason::Empty));
    let bad = SourceFile { content: vec![b'a', 0xff, 0xfe], ..file("r", "b.hs", "") };
    assert_eq!(filter_file(&bad, &FilterConfig::default()), FilterDecision::Drop(DropReason::Encoding));
}

#[test]
fn filter_ledger_reconciles() {
    let repos = vec![
        repo("r1", &["ok\n".into(), "x".repeat(2000), String::new()]),
        repo("r2", &["x".repeat(150)]),
    ];
    let (kept, ledger) = filter_repositories(repos, &FilterConfig::default());
    assert_eq!(kept.len(), 1);
    assert_eq!((ledger.input, ledger.kept), (4, 1));
    assert!(ledger.reconciles());
    let reasons: Vec<&str> = ledger.removed.iter().map(|r| r.reason.as_str()).collect();
    assert_eq!(reasons, ["max_line", "empty", "avg_line"]);
}

// ---- concatenation ----

#[test]
fn concat_orders_by_path() {
    let files = vec![file("r", "b", "B"), file("r", "a", "A")];
    let doc = concat_repository(&files, FILE_SEPARATOR).unwrap();
    assert_eq!(doc.text, "A\n\nB");
    assert_eq!(doc.doc_id, "r");
    let single = concat_repository(&[file("r", "only", "body\n")], FILE_SEPARATOR).unwrap();
    assert_eq!(single.text, "body\n");
    let custom = concat_repository(&files, "|").unwrap();
    assert_eq!(custom.text, "A|B");
}

#[test]
fn concat_rejects_mixed_languages() {
    let files = vec![file("r", "a", "A"), SourceFile::new("r", "b", Language::Lang2, "B")];
    assert!(matches!(concat_repository(&files, FILE_SEPARATOR), Err(Error::Contract(_))));
    assert!(concat_repository(&[], FILE_SEPARATOR).is_err());
    assert!(concat_repository(&[file("r", "a", "A"), file("s", "b", "B")], FILE_SEPARATOR).is_err());
}

// ---- dedup ----

fn texts(range: std::ops::Range<usize>) -> Vec<String> {
    range.map(|i| format!("file body {i}\n")).collect()
}

#[test]
fn dedup_exact_duplicates_keep_lowest_id() {
    let out = dedup_repositories(vec![repo("b", &texts(0..3)), repo("a", &texts(0..3))], DEFAULT_JACCARD);
    assert_eq!(out.kept.len(), 1);
    assert_eq!(out.kept[0].repo_id, "a");
    assert_eq!(out.ledger.removed[0].id, "b");
    assert_eq!(out.ledger.removed[0].reason, "exact_duplicate");
    assert!(out.ledger.reconciles());
}

#[test]
fn dedup_threshold_arithmetic() {
    // 9 shared of 10 each: 9 / 11
    let a: BTreeSet<usize> = (0..10).collect();
    let b: BTreeSet<usize> = (1..11).collect();
    assert!((jaccard(&a, &b) - 9.0 / 11.0).abs() < 1e-15);
    let mut b9 = texts(0..9);
    b9.push("different\n".into());
    let out = dedup_repositories(vec![repo("a", &texts(0..10)), repo("b", &b9)], DEFAULT_JACCARD);
    assert_eq!(out.kept.len(), 2);

    // 19 shared of 20 each: 19 / 21 > 0.9
    let mut b19 = texts(0..19);
    b19.push("different\n".into());
    let out = dedup_repositories(vec![repo("a", &texts(0..20)), repo("b", &b19)], DEFAULT_JACCARD);
    assert_eq!(out.kept.len(), 1);
    assert_eq!(out.ledger.removed[0].reason, "near_duplicate");
}

// ---- decontamination ----

fn doc(id: &str, text: &str) -> Document {
    Document { doc_id: id.into(), language: Language::Lang1, text: text.into() }
}

fn words(range: std::ops::Range<usize>) -> String {
    range.map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn decontamination_boundaries() {
    let test = vec![doc("t", &words(0..30))];
    let planted = format!("prefix tokens {} suffix", words(5..15));
    let nine = format!("prefix {} gap {}", words(5..14), words(20..29));
    let corpus = vec![doc("a", &planted), doc("b", &nine), doc("c", "unrelated text")];
    let out = decontaminate(corpus.clone(), &test, DEFAULT_NGRAM).unwrap();
    let kept: Vec<&str> = out.kept.iter().map(|d| d.doc_id.as_str()).collect();
    assert_eq!(kept, ["b", "c"]);
    assert_eq!(out.ledger.removed[0].id, "a");
    assert!(out.ledger.reconciles());

    let same = decontaminate(corpus.clone(), &[], DEFAULT_NGRAM).unwrap();
    assert_eq!(same.kept, corpus);
    assert!(decontaminate(corpus, &test, 0).is_err());
}

#[test]
fn decontamination_compares_raw_tokens() {
    let test = vec![doc("t", &words(0..10))];
    let upper = words(0..10).to_uppercase();
    let respaced = words(0..10).replace(' ', "\n\t ");
    let out = decontaminate(vec![doc("u", &upper), doc("s", &respaced)], &test, 10).unwrap();
    assert_eq!(out.kept.len(), 1);
    assert_eq!(out.kept[0].doc_id, "u");
}

/// Independent oracle: materialize every n-gram of both sides and intersect.
fn brute_force_removed(corpus: &[Document], test: &[Document], n: usize) -> BTreeSet<String> {
    let grams = |t: &str| -> BTreeSet<Vec<String>> {
        let toks: Vec<String> = t.split_whitespace().map(str::to_owned).collect();
        if toks.len() < n {
            return BTreeSet::new();
        }
        (0..=toks.len() - n).map(|i| toks[i..i + n].to_vec()).collect()
    };
    let test_grams: Vec<BTreeSet<Vec<String>>> = test.iter().map(|d| grams(&d.text)).collect();
    corpus
        .iter()
        .filter(|d| {
            let g = grams(&d.text);
            test_grams.iter().any(|t| !t.is_disjoint(&g))
        })
        .map(|d| d.doc_id.clone())
        .collect()
}

fn contaminated_corpus(seed: u64) -> (Vec<Document>, Vec<Document>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let test: Vec<Document> = Language::ALL
        .iter()
        .flat_map(|&l| generate_synthetic_corpus(seed + 1000, l, 4, 400))
        .collect();
    let mut corpus: Vec<Document> = Language::ALL
        .iter()
        .flat_map(|&l| generate_synthetic_corpus(seed, l, 67, 300))
        .take(200)
        .collect();
    for d in corpus.iter_mut() {
        if rng.gen_bool(0.2) {
            let src: Vec<&str> = test[rng.gen_range(0..test.len())].text.split_whitespace().collect();
            let len = rng.gen_range(7..13).min(src.len());
            let start = rng.gen_range(0..=src.len() - len);
            d.text = format!("{} {} {}", d.text, src[start..start + len].join(" "), d.text);
        }
    }
    (corpus, test)
}

#[test]
fn decontamination_matches_brute_force_oracle() {
    for seed in 0..3 {
        let (corpus, test) = contaminated_corpus(seed);
        assert_eq!(corpus.len(), 200);
        for n in [3, 8, 10] {
            let expected = brute_force_removed(&corpus, &test, n);
            let out = decontaminate(corpus.clone(), &test, n).unwrap();
            let got: BTreeSet<String> = out.ledger.removed.iter().map(|r| r.id.clone()).collect();
            assert_eq!(got, expected, "seed {seed}, n {n}");
            assert!(out.ledger.reconciles());
        }
    }
}

// ---- synthetic corpus ----

#[test]
fn synthetic_corpus_is_deterministic() {
    for l in Language::ALL {
        let a = generate_synthetic_corpus(7, l, 5, 200);
        assert_eq!(a, generate_synthetic_corpus(7, l, 5, 200));
        assert_ne!(a, generate_synthetic_corpus(8, l, 5, 200));
        assert!(a.iter().all(|d| d.text.len() == 200 && d.language == l));
    }
    let r = generate_synthetic_repos(3, Language::Lang2, 2, 3, 100);
    assert_eq!(r, generate_synthetic_repos(3, Language::Lang2, 2, 3, 100));
    assert_eq!(r[1].files[2].path, "src/Module2.scala");
}

#[test]
fn shared_core_appears_in_every_language() {
    for l in Language::ALL {
        let docs = generate_synthetic_corpus(1, l, 50, 400);
        let toks: BTreeSet<&str> = docs.iter().flat_map(|d| d.text.split_whitespace()).collect();
        for kw in SHARED_KEYWORDS {
            assert!(toks.contains(kw), "{l} never emits `{kw}`");
        }
    }
}

/// Multinomial naive Bayes over byte bigrams with add-one smoothing.
struct BigramClassifier {
    log_probs: BTreeMap<Language, Vec<f64>>,
}

impl BigramClassifier {
    fn bigrams(text: &str) -> impl Iterator<Item = usize> + '_ {
        text.as_bytes().windows(2).map(|w| usize::from(w[0]) * 256 + usize::from(w[1]))
    }

    fn train(docs: &[Document]) -> Self {
        let mut log_probs = BTreeMap::new();
        for l in Language::ALL {
            let mut counts = vec![1.0; 65536];
            for d in docs.iter().filter(|d| d.language == l) {
                for b in Self::bigrams(&d.text) {
                    counts[b] += 1.0;
                }
            }
            let total: f64 = counts.iter().sum();
            log_probs.insert(l, counts.iter().map(|c| (c / total).ln()).collect());
        }
        BigramClassifier { log_probs }
    }

    fn predict(&self, text: &str) -> Language {
        let score = |l: &Language| Self::bigrams(text).map(|b| self.log_probs[l][b]).sum::<f64>();
        *Language::ALL
            .iter()
            .max_by(|a, b| score(a).total_cmp(&score(b)))
            .unwrap()
    }
}

#[test]
fn bigram_classifier_separates_languages() {
    let train: Vec<Document> = Language::ALL.iter().flat_map(|&l| generate_synthetic_corpus(11, l, 100, 256)).collect();
    let test: Vec<Document> = Language::ALL.iter().flat_map(|&l| generate_synthetic_corpus(12, l, 100, 256)).collect();
    let clf = BigramClassifier::train(&train);
    let correct = test.iter().filter(|d| clf.predict(&d.text) == d.language).count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

// ---- on-disk formats ----

#[test]
fn repo_tree_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("raw");
    let mut repos = generate_synthetic_repos(1, Language::Lang1, 3, 2, 80);
    repos[0].files[0].path = "lib/deep/x.ml".into();
    repos[0].files.sort_by(|a, b| a.path.cmp(&b.path));
    write_repo_tree(&root, &repos).unwrap();
    std::fs::write(root.join(&repos[1].repo_id).join("README"), "x").unwrap();
    let tree = load_repo_tree(&root).unwrap();
    assert_eq!(tree.repos, repos);
    assert_eq!(tree.skipped.len(), 1);
    assert_eq!(tree.skipped[0].reason, "extension");

    // overwriting replaces the old tree entirely
    write_repo_tree(&root, &repos[..1]).unwrap();
    assert_eq!(load_repo_tree(&root).unwrap().repos.len(), 1);
    let leftovers = std::fs::read_dir(dir.path()).unwrap().count();
    assert_eq!(leftovers, 1);
}

#[test]
fn documents_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("docs.jsonl");
    let docs = generate_synthetic_corpus(2, Language::Lang0, 4, 64);
    write_documents(&path, &docs).unwrap();
    assert_eq!(read_documents(&path).unwrap(), docs);
    let line = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["language"], "lang0");
    assert_eq!(v.as_object().unwrap().len(), 3);

    assert_eq!(manifest_path(&path), dir.path().join("docs.jsonl.manifest.json"));
    assert_eq!(read_manifest(&path).unwrap(), None);
    let m = CorpusManifest::for_documents(&docs);
    assert_eq!(m.counts[&Language::Lang0].tokens, 256);
    write_manifest(&path, &m).unwrap();
    assert_eq!(read_manifest(&path).unwrap(), Some(m));
}

#[test]
fn corpus_hash_is_sensitive_to_content_and_boundaries() {
    let a = vec![doc("x", "ab"), doc("y", "c")];
    let b = vec![doc("x", "a"), doc("y", "bc")];
    assert_ne!(corpus_hash(&a), corpus_hash(&b));
    assert_eq!(corpus_hash(&a), corpus_hash(&a.clone()));
    assert_eq!(corpus_hash(&a).len(), 64);
}

mod properties {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Just, Strategy};

    fn repos_strategy() -> impl Strategy<Value = Vec<Repository>> {
        proptest::collection::vec(proptest::collection::btree_set(0usize..14, 0..12), 1..12).prop_map(|sets| {
            sets.into_iter()
                .enumerate()
                .map(|(i, s)| repo(&format!("r{i:02}"), &s.into_iter().map(|k| format!("body {k}")).collect::<Vec<_>>()))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn dedup_is_idempotent_and_separating(repos in repos_strategy(), threshold in proptest::sample::select(vec![0.5, 0.8, 0.9, 1.0])) {
            let once = dedup_repositories(repos.clone(), threshold);
            prop_assert!(once.ledger.reconciles());
            let twice = dedup_repositories(once.kept.clone(), threshold);
            prop_assert_eq!(&twice.kept, &once.kept);
            let sets: Vec<BTreeSet<[u8; 32]>> = once
                .kept
                .iter()
                .map(|r| r.files.iter().map(|f| content_hash(&f.content)).collect())
                .collect();
            for i in 0..sets.len() {
                for j in i + 1..sets.len() {
                    prop_assert!(jaccard(&sets[i], &sets[j]) < threshold);
                }
            }
        }

        #[test]
        fn concat_ignores_input_order(perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle()) {
            let files: Vec<SourceFile> = (0..5).map(|i| file("r", &format!("p{i}"), &format!("t{i}"))).collect();
            let shuffled: Vec<SourceFile> = perm.iter().map(|&i| files[i].clone()).collect();
            prop_assert_eq!(
                concat_repository(&shuffled, FILE_SEPARATOR).unwrap(),
                concat_repository(&files, FILE_SEPARATOR).unwrap()
            );
        }

        #[test]
        fn tokenizer_round_trips(s in ".*") {
            prop_assert_eq!(detokenize(&tokenize(&s)).unwrap(), s);
        }
    }
}
