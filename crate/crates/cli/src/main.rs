//! `fpmoe`: command-line driver for corpus curation, dense warm-up, MoE
//! assembly, joint training and evaluation.
//!
//! Every subcommand is a thin wrapper over a library call. Exit status is 0
//! on success, 1 on a usage or contract error and 2 on an I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fpmoe::backbone::{load_checkpoint, load_checkpoint_of_kind, save_checkpoint, Checkpoint, FfnKind, Model};
use fpmoe::config::RunConfig;
use fpmoe::corpus::{
    decontaminate, dedup_repositories, filter_repositories, generate_synthetic_corpus, generate_synthetic_repos,
    load_repo_tree, pack_repositories, read_documents, read_manifest, write_documents, write_manifest,
    write_repo_tree, CorpusManifest, Document, Repository, StageLedger,
};
use fpmoe::eval::{compare, evaluate, EvalOptions, EvalReport};
use fpmoe::io::{read_json, write_atomic, write_json, write_jsonl};
use fpmoe::pipeline::{assemble_moe, train_dense, train_joint, AblationConfig, AssemblySources, TrainOutcome, Variant};
use fpmoe::{Error, Language, Result};

#[derive(Parser)]
#[command(name = "fpmoe", version, about = "Language-aligned MoE pipeline at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corpus generation and curation.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    /// Dense training.
    #[command(subcommand)]
    Train(TrainCmd),
    /// MoE assembly and joint training.
    #[command(subcommand)]
    Moe(MoeCmd),
    /// Perplexity, routing diagnostics and comparison tables.
    #[command(subcommand)]
    Eval(EvalCmd),
}

/// Flags accepted by every subcommand.
#[derive(Args)]
struct Common {
    /// Overrides `train.seed` from the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output path, replaced atomically.
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<(RunConfig, u64)> {
        load_config(self.config.as_deref(), self.seed)
    }

    fn out(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::contract("--out is required"))
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<(RunConfig, u64)> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let seed = cfg.train.seed;
    Ok((cfg, seed))
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Generate the synthetic tri-language corpus. Writes a repository tree,
    /// or documents when `--out` ends in `.jsonl`.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Restrict generation to these languages.
        #[arg(long, value_delimiter = ',')]
        language: Vec<Language>,
    },
    /// Drop files with overlong lines.
    Filter(StageArgs),
    /// Drop exact and near-duplicate files.
    Dedup(StageArgs),
    /// Drop documents sharing an n-gram with a test set.
    Decontaminate {
        #[command(flatten)]
        stage: StageArgs,
        /// Held-out documents (`.jsonl`).
        #[arg(long, value_name = "FILE")]
        test: PathBuf,
        /// Overrides `corpus.ngram`.
        #[arg(long)]
        ngram: Option<usize>,
    },
    /// Print the manifest of a corpus.
    Stats {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Repository tree or `.jsonl` documents.
    #[arg(long = "in", value_name = "PATH")]
    input: PathBuf,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Warm up a dense checkpoint on a corpus.
    Dense {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        /// Starting checkpoint; a fresh `[model]` initialization when absent.
        #[arg(long, value_name = "FILE")]
        base: Option<PathBuf>,
        /// Train only on documents of this language.
        #[arg(long)]
        language: Option<Language>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Training documents (`.jsonl` or repository tree).
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Overrides the step budget of the stage.
    #[arg(long)]
    steps: Option<usize>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Loss trace; defaults to `<out>.trace.jsonl`.
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,
}

#[derive(Subcommand)]
enum MoeCmd {
    /// Build an MoE checkpoint from dense donors.
    Assemble {
        /// Ablation variant (A-E) and/or a TOML run configuration; may be
        /// given twice.
        #[arg(long = "config", value_name = "VARIANT|FILE")]
        config: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// Checkpoint supplying attention, norms and embeddings.
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        /// Language checkpoints in expert order (lang0, lang1, lang2).
        #[arg(long, value_name = "FILE", value_delimiter = ',')]
        experts: Vec<PathBuf>,
        /// Mixed-corpus checkpoint.
        #[arg(long, value_name = "FILE")]
        mixed: Option<PathBuf>,
    },
    /// Joint fine-tuning of an assembled checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Overrides the load-balancing coefficient.
        #[arg(long)]
        alpha: Option<f64>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Per-language perplexity.
    Ppl(EvalArgs),
    /// Perplexity plus routing diagnostics of an MoE checkpoint.
    Routing(EvalArgs),
    /// Tabulate reports against a baseline row.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Report files; the table keeps their order.
        #[arg(long = "report", value_name = "FILE", required = true)]
        reports: Vec<PathBuf>,
        /// Label of the baseline row; the first report by default.
        #[arg(long)]
        baseline: Option<String>,
    },
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Held-out documents.
    #[arg(long, value_name = "PATH")]
    data: PathBuf,
    /// Row label; the checkpoint file stem by default.
    #[arg(long)]
    label: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Corpus(c) => corpus(c),
        Command::Train(TrainCmd::Dense { common, run, base, language }) => train_dense_cmd(&common, &run, base, language),
        Command::Moe(MoeCmd::Assemble { config, seed, out, base, experts, mixed }) => {
            assemble_cmd(&config, seed, &out, &base, &experts, mixed.as_deref())
        }
        Command::Moe(MoeCmd::Train { common, run, input, alpha }) => moe_train_cmd(&common, &run, &input, alpha),
        Command::Eval(EvalCmd::Ppl(a)) => eval_cmd(&a, false),
        Command::Eval(EvalCmd::Routing(a)) => eval_cmd(&a, true),
        Command::Eval(EvalCmd::Compare { common, reports, baseline }) => compare_cmd(&common, &reports, baseline),
    }
}

// ---- corpus ----

enum Corpus {
    Tree(Vec<Repository>),
    Docs(Vec<Document>),
}

fn is_jsonl(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "jsonl")
}

/// Reads a corpus and its manifest, building a fresh manifest when none
/// sits next to it.
fn load_corpus(path: &Path) -> Result<(Corpus, CorpusManifest)> {
    let stored = read_manifest(path)?;
    if is_jsonl(path) {
        let docs = read_documents(path)?;
        let m = stored.unwrap_or_else(|| CorpusManifest::for_documents(&docs));
        return Ok((Corpus::Docs(docs), m));
    }
    if !path.is_dir() {
        return Err(Error::Io {
            path: path.into(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "no repository tree or .jsonl file here"),
        });
    }
    let tree = load_repo_tree(path)?;
    let m = match stored {
        Some(m) => m,
        None => {
            let fresh = CorpusManifest::for_repos(&tree.repos);
            if tree.skipped.is_empty() {
                fresh
            } else {
                let kept = tree.repos.iter().map(|r| r.files.len()).sum();
                let input = kept + tree.skipped.len();
                fresh.advance(CorpusManifest::for_repos(&tree.repos), StageLedger::new("load", "files", input, kept, tree.skipped))
            }
        }
    };
    Ok((Corpus::Tree(tree.repos), m))
}

fn documents(c: Corpus) -> Result<Vec<Document>> {
    match c {
        Corpus::Docs(d) => Ok(d),
        Corpus::Tree(r) => pack_repositories(&r),
    }
}

/// Writes a repository tree, or packed documents for a `.jsonl` path, with
/// the manifest alongside.
fn save_corpus(out: &Path, repos: Vec<Repository>, prev: &CorpusManifest, stage: StageLedger) -> Result<CorpusManifest> {
    let m = if is_jsonl(out) {
        let docs = pack_repositories(&repos)?;
        write_documents(out, &docs)?;
        prev.advance(CorpusManifest::for_documents(&docs), stage)
    } else {
        write_repo_tree(out, &repos)?;
        prev.advance(CorpusManifest::for_repos(&repos), stage)
    };
    write_manifest(out, &m)?;
    Ok(m)
}

fn print_stage(s: &StageLedger) {
    println!("{}: {} {} in, {} kept, {} removed", s.stage, s.input, s.unit, s.kept, s.removed.len());
}

fn expect_tree(c: Corpus, what: &str) -> Result<Vec<Repository>> {
    match c {
        Corpus::Tree(r) => Ok(r),
        Corpus::Docs(_) => Err(Error::contract(format!("{what} works on file-level repository trees, not documents"))),
    }
}

fn corpus(cmd: CorpusCmd) -> Result<()> {
    match cmd {
        CorpusCmd::Synth { common, language } => {
            let (cfg, seed) = common.load()?;
            let out = common.out()?;
            let s = &cfg.corpus.synth;
            let langs = if language.is_empty() { Language::ALL.to_vec() } else { language };
            let m = if is_jsonl(out) {
                let docs: Vec<Document> =
                    langs.iter().flat_map(|&l| generate_synthetic_corpus(seed, l, s.docs, s.doc_len)).collect();
                write_documents(out, &docs)?;
                CorpusManifest::for_documents(&docs)
            } else {
                let repos: Vec<Repository> = langs
                    .iter()
                    .flat_map(|&l| generate_synthetic_repos(seed, l, s.repos, s.files_per_repo, s.file_len))
                    .collect();
                write_repo_tree(out, &repos)?;
                CorpusManifest::for_repos(&repos)
            };
            write_manifest(out, &m)?;
            print_counts(&m);
        }
        CorpusCmd::Filter(a) => {
            let (cfg, _) = a.common.load()?;
            let (c, m) = load_corpus(&a.input)?;
            let (kept, ledger) = filter_repositories(expect_tree(c, "filter")?, &cfg.corpus.filter);
            print_stage(&ledger);
            save_corpus(a.common.out()?, kept, &m, ledger)?;
        }
        CorpusCmd::Dedup(a) => {
            let (cfg, _) = a.common.load()?;
            let (c, m) = load_corpus(&a.input)?;
            let outcome = dedup_repositories(expect_tree(c, "dedup")?, cfg.corpus.jaccard);
            print_stage(&outcome.ledger);
            save_corpus(a.common.out()?, outcome.kept, &m, outcome.ledger)?;
        }
        CorpusCmd::Decontaminate { stage, test, ngram } => {
            let (cfg, _) = stage.common.load()?;
            let out = stage.common.out()?;
            if !is_jsonl(out) {
                return Err(Error::contract("decontaminate writes documents; --out must end in .jsonl"));
            }
            let (c, m) = load_corpus(&stage.input)?;
            let test_docs = read_documents(&test)?;
            let outcome = decontaminate(documents(c)?, &test_docs, ngram.unwrap_or(cfg.corpus.ngram))?;
            print_stage(&outcome.ledger);
            write_documents(out, &outcome.kept)?;
            let next = m.advance(CorpusManifest::for_documents(&outcome.kept), outcome.ledger);
            write_manifest(out, &next)?;
        }
        CorpusCmd::Stats { common, input } => {
            common.load()?;
            let (_, m) = load_corpus(&input)?;
            print_counts(&m);
            for s in &m.stages {
                print_stage(s);
            }
            if let Some(out) = &common.out {
                write_json(out, &m)?;
            }
        }
    }
    Ok(())
}

fn print_counts(m: &CorpusManifest) {
    for (l, c) in &m.counts {
        let files = c.files.map_or(String::new(), |f| format!(" {f} files"));
        println!("{l} ({}): {} repos{files} {} docs {} tokens", l.analog(), c.repos, c.docs, c.tokens);
    }
}

// ---- training ----

fn trace_path(run: &RunArgs, out: &Path) -> PathBuf {
    run.trace.clone().unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".trace.jsonl");
        PathBuf::from(s)
    })
}

fn training_docs(path: &Path, language: Option<Language>) -> Result<Vec<Document>> {
    let (c, _) = load_corpus(path)?;
    let mut docs = documents(c)?;
    if let Some(l) = language {
        docs.retain(|d| d.language == l);
        if docs.is_empty() {
            return Err(Error::contract(format!("no {l} documents in {}", path.display())));
        }
    }
    Ok(docs)
}

fn save_outcome(outcome: &TrainOutcome, out: &Path, trace: &Path) -> Result<()> {
    save_checkpoint(&outcome.checkpoint, out)?;
    write_jsonl(trace, &outcome.trace)?;
    if let Some(last) = outcome.trace.last() {
        println!("step {}: loss {:.6} (ce {:.6}, aux {:.6})", last.step, last.loss, last.l_ce, last.l_aux);
    }
    println!("{}", outcome.checkpoint.provenance);
    Ok(())
}

fn train_dense_cmd(common: &Common, run: &RunArgs, base: Option<PathBuf>, language: Option<Language>) -> Result<()> {
    let (mut cfg, seed) = common.load()?;
    let out = common.out()?;
    if let Some(s) = run.steps {
        cfg.train.warmup_steps = s;
    }
    if run.epochs.is_some() {
        cfg.train.epochs = run.epochs;
    }
    let base = match base {
        Some(p) => load_checkpoint_of_kind(p, FfnKind::Dense)?,
        None => {
            let model_cfg = cfg.model.with_kind(FfnKind::Dense);
            Checkpoint::from_model(&Model::init(&model_cfg, seed)?, format!("init;seed={seed}"))
        }
    };
    let docs = training_docs(&run.data, language)?;
    let outcome = train_dense(&base, &docs, &cfg.train)?;
    save_outcome(&outcome, out, &trace_path(run, out))
}

fn assemble_cmd(
    config: &[String],
    seed: Option<u64>,
    out: &Path,
    base: &Path,
    experts: &[PathBuf],
    mixed: Option<&Path>,
) -> Result<()> {
    let mut variant = None;
    let mut file = None;
    for c in config {
        match c.parse::<Variant>() {
            Ok(v) if variant.replace(v).is_some() => return Err(Error::contract("--config names two variants")),
            Ok(_) => {}
            Err(_) if file.replace(PathBuf::from(c)).is_some() => {
                return Err(Error::contract("--config names two configuration files"))
            }
            Err(_) => {}
        }
    }
    let variant = variant.ok_or_else(|| Error::contract("--config A|B|C|D|E is required"))?;
    let (cfg, seed) = load_config(file.as_deref(), seed)?;
    let base = load_checkpoint(base)?;
    let languages = experts.iter().map(load_checkpoint).collect::<Result<Vec<_>>>()?;
    let mixed = mixed.map(load_checkpoint).transpose()?;
    // Architecture comes from the donors, routing hyperparameters from the
    // config file.
    let mut moe_cfg = base.config.clone();
    moe_cfg.n_routed_experts = cfg.model.n_routed_experts;
    moe_cfg.top_k = cfg.model.top_k;
    moe_cfg.alpha = cfg.model.alpha;
    let src = AssemblySources { base: &base, languages: &languages, mixed: mixed.as_ref() };
    let ckpt = assemble_moe(&src, &AblationConfig::for_variant(variant), &moe_cfg, seed)?;
    save_checkpoint(&ckpt, out)?;
    println!("{}", ckpt.provenance);
    Ok(())
}

fn moe_train_cmd(common: &Common, run: &RunArgs, input: &Path, alpha: Option<f64>) -> Result<()> {
    let (mut cfg, _) = common.load()?;
    let out = common.out()?;
    if let Some(s) = run.steps {
        cfg.train.joint_steps = s;
    }
    if run.epochs.is_some() {
        cfg.train.epochs = run.epochs;
    }
    if alpha.is_some() {
        cfg.train.alpha = alpha;
    }
    let moe = load_checkpoint_of_kind(input, FfnKind::Moe)?;
    let docs = training_docs(&run.data, None)?;
    let outcome = train_joint(&moe, &docs, &cfg.train)?;
    save_outcome(&outcome, out, &trace_path(run, out))
}

// ---- evaluation ----

fn eval_cmd(a: &EvalArgs, routing: bool) -> Result<()> {
    let (cfg, seed) = a.common.load()?;
    let out = a.common.out()?;
    let ckpt = load_checkpoint(&a.ckpt)?;
    let (c, _) = load_corpus(&a.data)?;
    let docs = documents(c)?;
    let label = a
        .label
        .clone()
        .unwrap_or_else(|| a.ckpt.file_stem().map_or("model".into(), |s| s.to_string_lossy().into_owned()));
    let opts = EvalOptions { label, seq_len: cfg.eval.seq_len, seed };
    let mut report = evaluate(&ckpt, &docs, &opts)?;
    for (l, e) in &report.languages {
        println!("{l} ({}): ce {:.6} ppl {:.4} over {} tokens", l.analog(), e.ce, e.perplexity, e.tokens);
    }
    println!("average ppl {:.4}", report.average_perplexity);
    if routing {
        match &report.routing {
            None => eprintln!("note: dense checkpoint, routing statistics omitted"),
            Some(r) => {
                println!("routing entropy: unconditional {:.4}, conditional {:.4}", r.unconditional_entropy, r.conditional_entropy);
                for (l, e) in &r.majority_expert {
                    println!("{l}: majority expert {e}, entropy {:.4}", r.per_language_entropy[l]);
                }
                if let Some(g) = r.shared_gate_mean {
                    println!("shared gate mean {g:.4}");
                }
            }
        }
    } else {
        report.routing = None;
    }
    write_json(out, &report)
}

fn compare_cmd(common: &Common, paths: &[PathBuf], baseline: Option<String>) -> Result<()> {
    common.load()?;
    let out = common.out()?;
    let reports = paths.iter().map(|p| read_json::<EvalReport>(p)).collect::<Result<Vec<_>>>()?;
    let baseline = baseline.unwrap_or_else(|| reports[0].label.clone());
    let table = compare(&reports, &baseline)?;
    let md = table.to_markdown();
    print!("{md}");
    if out.extension().is_some_and(|e| e == "md") {
        write_atomic(out, md.as_bytes())
    } else {
        write_json(out, &table)
    }
}
