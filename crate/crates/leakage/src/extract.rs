//! Document recovery and corpus extraction against the oracles.

use crate::oracle::{BooleanOracle, Doc, MspsiOracle, NumDocOracle};
use crate::LeakageError;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Recovery {
    pub doc: Doc,
    /// False when no document contains the starting set.
    pub matched: bool,
}

/// Greedily extends `known` with every keyword `0..n` that keeps a match,
/// asking exactly `n` queries.
pub fn recover_document(oracle: &mut impl BooleanOracle, known: &Doc, n: usize) -> Recovery {
    let mut doc = known.clone();
    let mut matched = false;
    for i in 0..n {
        let mut probe = doc.clone();
        probe.insert(i);
        if oracle.any_contains(&probe) {
            doc = probe;
            matched = true;
        }
    }
    Recovery { doc, matched }
}

fn covered(p: &Doc, found: &[Doc]) -> bool {
    found.iter().any(|d| p.is_subset(d))
}

/// Extraction with a boolean oracle: explores every matching keyword set of
/// up to `ulim` elements, and completes each set not yet covered by a known
/// document with `recover_document`.
///
/// Finds every document whose uniqueness number is at most `ulim`, never
/// reports a set that is not a document, and asks at most one query per
/// matching set of size at most `ulim` plus `n` per document found.
pub fn extract_one_bit(oracle: &mut impl BooleanOracle, n: usize, ulim: usize) -> Vec<Doc> {
    let mut found = Vec::new();
    one_bit_step(oracle, n, ulim, &mut found, &Doc::new(), 0);
    found
}

fn one_bit_step(oracle: &mut impl BooleanOracle, n: usize, ulim: usize, found: &mut Vec<Doc>, p: &Doc, k: usize) {
    if p.len() < ulim {
        for i in k..n {
            let mut extended = p.clone();
            extended.insert(i);
            if oracle.any_contains(&extended) {
                one_bit_step(oracle, n, ulim, found, &extended, i + 1);
            }
        }
    }
    if !covered(p, found) {
        let complete = recover_document(oracle, p, n);
        if complete.matched {
            found.push(complete.doc);
        }
    }
}

/// Extraction with a counting oracle.
///
/// A branch that skips keyword `a_i` must only count documents without
/// `a_i`. The oracle's count for `P ∪ {a_j}` also includes documents with
/// keywords skipped earlier; those were all recovered by the branch that
/// took the keyword, which runs first, so they are subtracted from the
/// answer before it is compared.
pub fn extract_num_doc(oracle: &mut NumDocOracle<'_>, n: usize) -> Vec<Doc> {
    let mut found = Vec::new();
    num_doc_step(oracle, n, &mut found, &Doc::new(), 0, None);
    found
}

fn num_doc_step(oracle: &mut NumDocOracle<'_>, n: usize, found: &mut Vec<Doc>, p: &Doc, k: usize, matches: Option<usize>) {
    for i in k..n {
        let mut extended = p.clone();
        extended.insert(i);
        let already = found.iter().filter(|d| extended.is_subset(d)).count();
        let next = oracle.query(&extended) - already;
        if next > 0 {
            num_doc_step(oracle, n, found, &extended, i + 1, Some(next));
            match matches {
                None => num_doc_step(oracle, n, found, p, i + 1, None),
                Some(m) if m > next => num_doc_step(oracle, n, found, p, i + 1, Some(m - next)),
                Some(_) => {}
            }
            return;
        }
    }
    // With an unknown count the empty set is not known to be a document.
    if matches.is_some() {
        found.push(p.clone());
    }
}

/// Asks every keyword once in batches of the oracle's limit and reads the
/// documents off the incidence matrix.
pub fn extract_mspsi(oracle: &mut MspsiOracle, n: usize, doc_count: usize) -> Result<Vec<Doc>, LeakageError> {
    let mut docs = vec![Doc::new(); doc_count];
    let all: Vec<usize> = (0..n).collect();
    for batch in all.chunks(oracle.lim()) {
        let rows = oracle.query(batch)?;
        for (&keyword, row) in batch.iter().zip(rows) {
            for (d, present) in row.into_iter().enumerate() {
                if present {
                    docs[d].insert(keyword);
                }
            }
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::OneBitOracle;

    fn doc(ks: &[usize]) -> Doc {
        ks.iter().copied().collect()
    }

    fn sorted(mut v: Vec<Doc>) -> Vec<Doc> {
        v.sort();
        v
    }

    #[test]
    fn recover_from_one_keyword() {
        let docs = vec![doc(&[0, 1, 2])];
        let mut o = OneBitOracle::new(&docs);
        let r = recover_document(&mut o, &doc(&[0]), 4);
        assert_eq!(r, Recovery { doc: doc(&[0, 1, 2]), matched: true });
        assert!(o.queries() <= 4);
    }

    #[test]
    fn recover_maximal_is_unchanged() {
        let docs = vec![doc(&[0, 1]), doc(&[2])];
        let mut o = OneBitOracle::new(&docs);
        assert_eq!(recover_document(&mut o, &doc(&[0, 1]), 3).doc, doc(&[0, 1]));
    }

    #[test]
    fn recover_without_match() {
        let docs = vec![doc(&[0]), doc(&[1])];
        let mut o = OneBitOracle::new(&docs);
        let r = recover_document(&mut o, &doc(&[0, 1]), 2);
        assert_eq!(r, Recovery { doc: doc(&[0, 1]), matched: false });
    }

    #[test]
    fn one_bit_disjoint_pair() {
        let docs = vec![doc(&[0, 1]), doc(&[2, 3])];
        let mut o = OneBitOracle::new(&docs);
        assert_eq!(sorted(extract_one_bit(&mut o, 4, 2)), docs);
    }

    #[test]
    fn one_bit_misses_document_above_limit() {
        // Every document needs two keywords to be identified. With ulim = 1
        // the linear phase still reaches the first two, but not {1,2}.
        let docs = vec![doc(&[0, 1]), doc(&[0, 2]), doc(&[1, 2])];
        let mut o = OneBitOracle::new(&docs);
        let got = extract_one_bit(&mut o, 3, 1);
        assert!(!got.contains(&doc(&[1, 2])));
        assert!(got.iter().all(|d| docs.contains(d)));
    }

    #[test]
    fn num_doc_small_corpus() {
        let docs = vec![doc(&[0, 2]), doc(&[1])];
        let mut o = NumDocOracle::new(&docs);
        assert_eq!(sorted(extract_num_doc(&mut o, 3)), sorted(docs.clone()));
        assert!(o.queries() <= 6);
    }

    #[test]
    fn num_doc_single_document() {
        let docs = vec![doc(&[1, 3, 4])];
        let mut o = NumDocOracle::new(&docs);
        assert_eq!(extract_num_doc(&mut o, 6), docs);
        assert!(o.queries() <= 12);
    }

    #[test]
    fn mspsi_extraction_is_exact_and_tight() {
        let docs = vec![doc(&[0, 5, 24]), doc(&[3, 11]), doc(&[7, 8, 9, 20])];
        let mut o = MspsiOracle::new(&docs, 10, 5).unwrap();
        assert_eq!(extract_mspsi(&mut o, 25, docs.len()).unwrap(), docs);
        assert_eq!(o.queries(), 3);
    }
}
