use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// One of the three language families of the corpus.
///
/// The tags are logical stand-ins for Haskell (`lang0`), OCaml (`lang1`) and
/// Scala (`lang2`). The numeric index doubles as the routed-expert slot a
/// language is aligned with during assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Lang0,
    Lang1,
    Lang2,
}

impl Language {
    pub const ALL: [Language; 3] = [Language::Lang0, Language::Lang1, Language::Lang2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Language> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Language::Lang0 => "lang0",
            Language::Lang1 => "lang1",
            Language::Lang2 => "lang2",
        }
    }

    /// The real-world language this tag stands in for.
    pub fn analog(self) -> &'static str {
        match self {
            Language::Lang0 => "haskell",
            Language::Lang1 => "ocaml",
            Language::Lang2 => "scala",
        }
    }

    /// File extension used for raw source files on disk.
    pub fn extension(self) -> &'static str {
        match self {
            Language::Lang0 => "hs",
            Language::Lang1 => "ml",
            Language::Lang2 => "scala",
        }
    }

    pub fn from_extension(ext: &str) -> Option<Language> {
        Self::ALL.into_iter().find(|l| l.extension() == ext)
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s || l.analog() == s)
            .ok_or_else(|| Error::UnknownLanguage(s.to_string()))
    }
}
