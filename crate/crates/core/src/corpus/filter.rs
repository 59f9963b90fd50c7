use serde::{Deserialize, Serialize};

use super::{Removal, Repository, SourceFile, StageLedger};

/// Line-length thresholds; a file is dropped when a value strictly exceeds
/// its limit. Lengths count Unicode scalar values without the line break.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub max_avg_line: usize,
    pub max_line: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { max_avg_line: 100, max_line: 1000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Empty,
    Encoding,
    AvgLine,
    MaxLine,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::Empty => "empty",
            DropReason::Encoding => "encoding",
            DropReason::AvgLine => "avg_line",
            DropReason::MaxLine => "max_line",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

/// The maximum-line rule is checked before the average rule, so a file that
/// violates both reports `max_line`.
pub fn filter_file(file: &SourceFile, cfg: &FilterConfig) -> FilterDecision {
    let Some(text) = file.text() else {
        return FilterDecision::Drop(DropReason::Encoding);
    };
    if text.is_empty() {
        return FilterDecision::Drop(DropReason::Empty);
    }
    let (mut lines, mut total, mut longest) = (0usize, 0usize, 0usize);
    for line in text.lines() {
        let n = line.chars().count();
        lines += 1;
        total += n;
        longest = longest.max(n);
    }
    if longest > cfg.max_line {
        FilterDecision::Drop(DropReason::MaxLine)
    } else if total > cfg.max_avg_line * lines {
        FilterDecision::Drop(DropReason::AvgLine)
    } else {
        FilterDecision::Keep
    }
}

/// Applies [`filter_file`] to every file. Repositories left without files
/// disappear; the ledger counts files.
pub fn filter_repositories(repos: Vec<Repository>, cfg: &FilterConfig) -> (Vec<Repository>, StageLedger) {
    let mut input = 0;
    let mut removed = Vec::new();
    let mut kept_repos = Vec::new();
    for mut repo in repos {
        input += repo.files.len();
        repo.files.retain(|f| match filter_file(f, cfg) {
            FilterDecision::Keep => true,
            FilterDecision::Drop(r) => {
                removed.push(Removal {
                    id: format!("{}/{}", f.repo_id, f.path),
                    reason: r.as_str().into(),
                    detail: None,
                });
                false
            }
        });
        if !repo.files.is_empty() {
            kept_repos.push(repo);
        }
    }
    let kept = kept_repos.iter().map(|r| r.files.len()).sum();
    (kept_repos, StageLedger::new("filter", "files", input, kept, removed))
}
