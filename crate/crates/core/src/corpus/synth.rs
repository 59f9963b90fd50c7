//! Three synthetic functional languages drawn from one grammar core.
//!
//! All languages share identifiers, numerals, the keywords in
//! [`SHARED_KEYWORDS`], parentheses and list brackets. They differ in
//! statement syntax (signatures, pattern matching, module forms), comment
//! markers, application and lambda notation, and part of their operator and
//! keyword inventory, loosely following Haskell, OCaml and Scala.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Document, Repository, SourceFile};
use crate::language::Language;

/// Keywords every language uses.
pub const SHARED_KEYWORDS: [&str; 5] = ["if", "else", "type", "true", "false"];

const IDENTS: [&str; 14] = [
    "x", "y", "n", "k", "v", "acc", "xs", "ys", "node", "size", "total", "item", "depth", "key",
];
const VERBS: [&str; 10] = ["map", "fold", "sum", "filter", "find", "insert", "merge", "split", "walk", "count"];
const NOUNS: [&str; 6] = ["all", "by", "tree", "list", "pair", "step"];
const TYPES: [&str; 4] = ["Int", "Bool", "String", "Char"];
const CTORS: [&str; 8] = ["Leaf", "Node", "Empty", "Cons", "Pair", "Tip", "Branch", "Cell"];
const MODULES: [&str; 6] = ["List", "Map", "Set", "Text", "Array", "Option"];
const WORDS: [&str; 8] = ["helper", "fast", "path", "for", "the", "base", "case", "result"];
const SHARED_OPS: [&str; 4] = ["+", "-", "*", "=="];

struct Gen {
    lang: Language,
    rng: ChaCha8Rng,
}

impl Gen {
    fn pick<'a>(&mut self, xs: &[&'a str]) -> &'a str {
        xs.choose(&mut self.rng).copied().expect("non-empty pool")
    }

    fn ident(&mut self) -> &'static str {
        self.pick(&IDENTS)
    }

    fn func(&mut self) -> String {
        let (v, n) = (self.pick(&VERBS), self.pick(&NOUNS));
        match self.lang {
            Language::Lang1 => format!("{v}_{n}"),
            _ => format!("{v}{}{}", n[..1].to_uppercase(), &n[1..]),
        }
    }

    fn ty(&mut self) -> String {
        let t = self.pick(&TYPES);
        match self.lang {
            Language::Lang1 => t.to_lowercase(),
            _ => t.to_string(),
        }
    }

    fn atom(&mut self) -> String {
        match self.rng.gen_range(0..6) {
            0 => self.rng.gen_range(0..100).to_string(),
            1 => self.pick(&["true", "false"]).to_string(),
            _ => self.ident().to_string(),
        }
    }

    fn op(&mut self) -> &'static str {
        if self.rng.gen_bool(0.5) {
            return self.pick(&SHARED_OPS);
        }
        match self.lang {
            Language::Lang0 => self.pick(&["++", "<>", "$", "<$>"]),
            Language::Lang1 => self.pick(&["^", "@", "|>", "+."]),
            Language::Lang2 => self.pick(&["++", "&&", "::", "!="]),
        }
    }

    fn expr(&mut self, depth: usize) -> String {
        if depth == 0 {
            return self.atom();
        }
        let d = depth - 1;
        let l = self.lang;
        match self.rng.gen_range(0..7) {
            0 => self.atom(),
            1 => {
                let (a, o, b) = (self.expr(d), self.op(), self.atom());
                format!("{a} {o} {b}")
            }
            2 => {
                let (c, a, b) = (self.cond(), self.expr(d), self.expr(d));
                match l {
                    Language::Lang2 => format!("if ({c}) {a} else {b}"),
                    _ => format!("if {c} then {a} else {b}"),
                }
            }
            3 => {
                let (f, a, b) = (self.func(), self.atom(), self.atom());
                match l {
                    Language::Lang2 => format!("{f}({a}, {b})"),
                    _ => format!("{f} {a} {b}"),
                }
            }
            4 => {
                let (x, a, b) = (self.ident(), self.expr(d), self.expr(d));
                match l {
                    Language::Lang2 => format!("{{ val {x} = {a}; {b} }}"),
                    _ => format!("let {x} = {a} in {b}"),
                }
            }
            5 => {
                let (x, a) = (self.ident(), self.expr(d));
                match l {
                    Language::Lang0 => format!("(\\{x} -> {a})"),
                    Language::Lang1 => format!("(fun {x} -> {a})"),
                    Language::Lang2 => format!("({x} => {a})"),
                }
            }
            _ => {
                let (a, b) = (self.atom(), self.atom());
                match l {
                    Language::Lang0 => format!("[{a}, {b}]"),
                    Language::Lang1 => format!("[{a}; {b}]"),
                    Language::Lang2 => format!("List({a}, {b})"),
                }
            }
        }
    }

    fn cond(&mut self) -> String {
        let (a, b) = (self.ident(), self.atom());
        let o = match self.lang {
            Language::Lang0 => self.pick(&["==", "/=", "<", ">"]),
            Language::Lang1 => self.pick(&["=", "<>", "<", ">"]),
            Language::Lang2 => self.pick(&["==", "!=", "<", ">"]),
        };
        format!("{a} {o} {b}")
    }

    fn comment(&mut self) -> String {
        let words: Vec<&str> = (0..self.rng.gen_range(2..5)).map(|_| self.pick(&WORDS)).collect();
        let w = words.join(" ");
        match self.lang {
            Language::Lang0 => format!("-- {w}\n"),
            Language::Lang1 => format!("(* {w} *)\n"),
            Language::Lang2 => format!("// {w}\n"),
        }
    }

    fn statement(&mut self) -> String {
        let depth = self.rng.gen_range(1..3);
        match (self.lang, self.rng.gen_range(0..8)) {
            (_, 0) => self.comment(),
            (Language::Lang0, 1) => {
                let (f, a, b, x, e) = (self.func(), self.ty(), self.ty(), self.ident(), self.expr(depth));
                format!("{f} :: {a} -> {b}\n{f} {x} = {e}\n")
            }
            (Language::Lang0, 2) => {
                let (f, x, n, a, b) = (self.func(), self.ident(), self.atom(), self.expr(depth), self.expr(depth));
                format!("{f} {x}\n  | {x} == {n} = {a}\n  | otherwise = {b}\n")
            }
            (Language::Lang0, 3) => {
                let (c, c1, t, c2) = (self.pick(&CTORS), self.pick(&CTORS), self.ty(), self.pick(&CTORS));
                format!("data {c} = {c1} {t} | {c2}\n  deriving (Show, Eq)\n")
            }
            (Language::Lang0, 4) => {
                let (f, xs, x, ys) = (self.func(), self.ident(), self.ident(), self.ident());
                let (a, b) = (self.expr(depth), self.expr(depth));
                format!("{f} {xs} = case {xs} of\n  [] -> {a}\n  ({x}:{ys}) -> {b}\n")
            }
            (Language::Lang0, 5) => format!("import Data.{}\n", self.pick(&MODULES)),
            (Language::Lang0, 6) => {
                let (c, t) = (self.pick(&CTORS), self.ty());
                format!("type {c} = [{t}]\n")
            }
            (Language::Lang0, _) => {
                let (f, x, e, y, w) = (self.func(), self.ident(), self.expr(depth), self.ident(), self.expr(depth));
                format!("{f} {x} = {e}\n  where {y} = {w}\n")
            }
            (Language::Lang1, 1) => {
                let (f, x, e) = (self.func(), self.ident(), self.expr(depth));
                format!("let {f} {x} = {e}\n")
            }
            (Language::Lang1, 2) => {
                let (f, xs, x, ys) = (self.func(), self.ident(), self.ident(), self.ident());
                let (a, b) = (self.expr(depth), self.expr(depth));
                format!("let rec {f} {xs} =\n  match {xs} with\n  | [] -> {a}\n  | {x} :: {ys} -> {b}\n")
            }
            (Language::Lang1, 3) => {
                let (c, c1, t, c2) = (self.pick(&NOUNS), self.pick(&CTORS), self.ty(), self.pick(&CTORS));
                format!("type {c} = {c1} of {t} | {c2}\n")
            }
            (Language::Lang1, 4) => format!("open {}\n", self.pick(&MODULES)),
            (Language::Lang1, 5) => format!("let () = print_endline ({})\n", self.expr(depth)),
            (Language::Lang1, 6) => {
                let (m, f, x, e) = (self.pick(&MODULES), self.func(), self.ident(), self.expr(depth));
                format!("module {m}_ext = struct\n  let {f} {x} = {e}\nend\n")
            }
            (Language::Lang1, _) => {
                let (c, t) = (self.pick(&NOUNS), self.ty());
                format!("type {c} = {t} list\n")
            }
            (Language::Lang2, 1) => {
                let (f, x, a, b, e) = (self.func(), self.ident(), self.ty(), self.ty(), self.expr(depth));
                format!("def {f}({x}: {a}): {b} = {e}\n")
            }
            (Language::Lang2, 2) => {
                let (x, t, e) = (self.ident(), self.ty(), self.expr(depth));
                format!("val {x}: {t} = {e}\n")
            }
            (Language::Lang2, 3) => {
                let (c, x, a, y, b) = (self.pick(&CTORS), self.ident(), self.ty(), self.ident(), self.ty());
                format!("case class {c}({x}: {a}, {y}: {b})\n")
            }
            (Language::Lang2, 4) => format!("import scala.collection.{}\n", self.pick(&MODULES)),
            (Language::Lang2, 5) => {
                let (xs, x, ys) = (self.ident(), self.ident(), self.ident());
                let (a, b) = (self.expr(depth), self.expr(depth));
                format!("{xs} match {{\n  case Nil => {a}\n  case {x} :: {ys} => {b}\n}}\n")
            }
            (Language::Lang2, 6) => {
                let (c, f, x, a, b, e) = (self.pick(&CTORS), self.func(), self.ident(), self.ty(), self.ty(), self.expr(depth));
                format!("object {c} {{\n  def {f}({x}: {a}): {b} = {e}\n}}\n")
            }
            (Language::Lang2, _) => {
                let (c, t) = (self.pick(&CTORS), self.ty());
                format!("type {c} = List[{t}]\n")
            }
        }
    }

    /// Whole statements up to exactly `len` bytes (the grammar is ASCII).
    fn text(&mut self, len: usize) -> String {
        let mut out = String::with_capacity(len + 128);
        while out.len() < len {
            out.push_str(&self.statement());
        }
        out.truncate(len);
        out
    }
}

fn generator(seed: u64, lang: Language, stream: u64) -> Gen {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream * 8 + lang.index() as u64);
    Gen { lang, rng }
}

/// `n_docs` documents of exactly `doc_len` bytes, deterministic in
/// `(seed, language)`.
pub fn generate_synthetic_corpus(seed: u64, language: Language, n_docs: usize, doc_len: usize) -> Vec<Document> {
    let mut g = generator(seed, language, 0);
    (0..n_docs)
        .map(|i| Document {
            doc_id: format!("{language}-{i:05}"),
            language,
            text: g.text(doc_len),
        })
        .collect()
}

/// Raw repositories of `files_per_repo` files, each `file_len` bytes.
pub fn generate_synthetic_repos(
    seed: u64,
    language: Language,
    n_repos: usize,
    files_per_repo: usize,
    file_len: usize,
) -> Vec<Repository> {
    let mut g = generator(seed, language, 1);
    (0..n_repos)
        .map(|r| {
            let repo_id = format!("{language}-repo-{r:04}");
            let files = (0..files_per_repo)
                .map(|i| {
                    let stem = match language {
                        Language::Lang1 => format!("module_{i}"),
                        _ => format!("Module{i}"),
                    };
                    let path = format!("src/{stem}.{}", language.extension());
                    SourceFile::new(repo_id.clone(), path, language, g.text(file_len))
                })
                .collect();
            Repository { repo_id, files }
        })
        .collect()
}
