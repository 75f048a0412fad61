//! Reading a corpus from disk: one document per file, one keyword per line.

use std::fs;
use std::path::Path;

use datashare_core::mspsi::{Corpus, Keyword};

use crate::NodeError;

/// Loads every regular file in `dir`, in file-name order. Lines are
/// trimmed; empty lines are skipped.
pub fn load_dir(dir: &Path) -> Result<(Vec<String>, Corpus), NodeError> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_ok_and(|t| t.is_file()))
        .map(|e| e.path())
        .collect();
    files.sort();
    let mut names = Vec::with_capacity(files.len());
    let mut docs = Vec::with_capacity(files.len());
    for path in files {
        let text = fs::read_to_string(&path)?;
        names.push(path.file_name().unwrap_or_default().to_string_lossy().into_owned());
        docs.push(parse_keywords(text.lines()));
    }
    Ok((names, Corpus::new(docs)))
}

/// Splits a comma-separated keyword list.
pub fn parse_query(list: &str) -> Vec<Keyword> {
    parse_keywords(list.split(','))
}

fn parse_keywords<'a>(items: impl Iterator<Item = &'a str>) -> Vec<Keyword> {
    items
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(|k| k.as_bytes().to_vec())
        .collect()
}
