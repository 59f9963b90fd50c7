use std::path::{Path, PathBuf};

use super::{CorpusManifest, Document, Removal, Repository, SourceFile};
use crate::error::{Error, Result};
use crate::io::{read_json, read_jsonl, write_json, write_jsonl};
use crate::language::Language;

/// A raw corpus read from disk plus the files that could not be assigned a
/// language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RepoTree {
    pub repos: Vec<Repository>,
    pub skipped: Vec<Removal>,
}

/// Reads `<root>/<repo_id>/**/<file>`. Languages come from file extensions;
/// files with other extensions are reported in `skipped`. Top-level regular
/// files are ignored.
pub fn load_repo_tree(root: &Path) -> Result<RepoTree> {
    let mut repos = Vec::new();
    let mut skipped = Vec::new();
    for entry in read_dir_sorted(root)? {
        if !entry.is_dir() {
            continue;
        }
        let repo_id = file_name(&entry);
        let mut files = Vec::new();
        let mut stack = vec![entry.clone()];
        while let Some(dir) = stack.pop() {
            for p in read_dir_sorted(&dir)? {
                if p.is_dir() {
                    stack.push(p);
                    continue;
                }
                let rel = p
                    .strip_prefix(&entry)
                    .expect("walked below the repository root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy().into_owned())
                    .collect::<Vec<_>>()
                    .join("/");
                let ext = p.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_default();
                match Language::from_extension(&ext) {
                    Some(language) => {
                        let content = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                        files.push(SourceFile { repo_id: repo_id.clone(), path: rel, language, content });
                    }
                    None => skipped.push(Removal {
                        id: format!("{repo_id}/{rel}"),
                        reason: "extension".into(),
                        detail: None,
                    }),
                }
            }
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        repos.push(Repository { repo_id, files });
    }
    Ok(RepoTree { repos, skipped })
}

/// Writes the tree into a fresh sibling directory and swaps it into place.
pub fn write_repo_tree(root: &Path, repos: &[Repository]) -> Result<()> {
    let parent = match root.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let staging = tempfile::Builder::new()
        .prefix(".fpmoe-tree")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    for repo in repos {
        for f in &repo.files {
            if f.path.split('/').any(|c| c.is_empty() || c == "." || c == "..") || repo.repo_id.contains('/') {
                return Err(Error::contract(format!("unsafe path `{}/{}`", repo.repo_id, f.path)));
            }
            let dest = staging.path().join(&repo.repo_id).join(&f.path);
            if let Some(d) = dest.parent() {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
            std::fs::write(&dest, &f.content).map_err(|e| Error::io(&dest, e))?;
        }
    }
    let staged = staging.keep();
    let backup = if root.exists() {
        let b = parent.join(format!(".{}.old-{}", file_name(root), std::process::id()));
        std::fs::rename(root, &b).map_err(|e| Error::io(root, e))?;
        Some(b)
    } else {
        None
    };
    std::fs::rename(&staged, root).map_err(|e| Error::io(root, e))?;
    if let Some(b) = backup {
        std::fs::remove_dir_all(&b).map_err(|e| Error::io(&b, e))?;
    }
    Ok(())
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    read_jsonl(path)
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    write_jsonl(path, docs)
}

/// `<path>.manifest.json`, next to a corpus file or directory.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    let mut name = corpus.file_name().map(|n| n.to_os_string()).unwrap_or_else(|| "corpus".into());
    name.push(".manifest.json");
    corpus.with_file_name(name)
}

/// The manifest stored next to `corpus`, if any.
pub fn read_manifest(corpus: &Path) -> Result<Option<CorpusManifest>> {
    let p = manifest_path(corpus);
    if !p.exists() {
        return Ok(None);
    }
    read_json(&p).map(Some)
}

pub fn write_manifest(corpus: &Path, manifest: &CorpusManifest) -> Result<()> {
    write_json(&manifest_path(corpus), manifest)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}
