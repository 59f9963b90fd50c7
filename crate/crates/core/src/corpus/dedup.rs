use std::collections::BTreeSet;

use super::{content_hash, Removal, Repository, StageLedger};

/// Repositories at or above this file-set similarity are merged.
pub const DEFAULT_JACCARD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct DedupOutcome {
    /// Survivors in `repo_id` order.
    pub kept: Vec<Repository>,
    pub ledger: StageLedger,
}

/// |a ∩ b| / |a ∪ b|, with two empty sets counting as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Repository-level deduplication over sets of file content hashes.
///
/// Repositories are visited in `repo_id` order and each is compared against
/// every survivor so far; the first survivor with similarity at or above
/// `threshold` absorbs it. Survivors are therefore pairwise below the
/// threshold and the lowest id of every cluster is kept, which also makes the
/// operation idempotent.
pub fn dedup_repositories(mut repos: Vec<Repository>, threshold: f64) -> DedupOutcome {
    repos.sort_by(|a, b| a.repo_id.cmp(&b.repo_id));
    let input = repos.len();
    let mut kept: Vec<(Repository, BTreeSet<[u8; 32]>)> = Vec::new();
    let mut removed = Vec::new();
    for repo in repos {
        let hashes: BTreeSet<[u8; 32]> = repo.files.iter().map(|f| content_hash(&f.content)).collect();
        let hit = kept.iter().find_map(|(s, h)| {
            let j = jaccard(h, &hashes);
            (j >= threshold).then(|| (s.repo_id.clone(), h == &hashes, j))
        });
        match hit {
            Some((survivor, exact, j)) => removed.push(Removal {
                id: repo.repo_id,
                reason: if exact { "exact_duplicate" } else { "near_duplicate" }.into(),
                detail: Some(format!("of {survivor}, jaccard {j:.4}")),
            }),
            None => kept.push((repo, hashes)),
        }
    }
    let kept: Vec<Repository> = kept.into_iter().map(|(r, _)| r).collect();
    let ledger = StageLedger::new("dedup", "repos", input, kept.len(), removed);
    DedupOutcome { kept, ledger }
}
