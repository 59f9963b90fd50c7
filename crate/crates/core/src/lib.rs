// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod io;
pub mod language;
pub mod moe;
pub mod pipeline;

pub use error::{CheckpointError, Error, Result};
pub use language::Language;

/// The book's code blocks, compiled and run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/moe-block.md")]
    struct MoeBlock;
    #[doc = include_str!("../../../book/src/assembly.md")]
    struct Assembly;
    #[doc = include_str!("../../../book/src/corpus.md")]
    struct Corpus;
    #[doc = include_str!("../../../book/src/training.md")]
    struct Training;
    #[doc = include_str!("../../../book/src/checkpoint.md")]
    struct CheckpointFormat;
    #[doc = include_str!("../../../book/src/configuration.md")]
    struct Configuration;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct CommandLine;
}
