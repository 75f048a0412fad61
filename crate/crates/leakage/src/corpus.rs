//! Random corpora and uniqueness numbers.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::oracle::Doc;
use crate::LeakageError;

/// Largest document `uniqueness` will enumerate subsets of.
pub const MAX_UNIQUENESS_DOC: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusSpec {
    /// Universe size.
    pub keywords: usize,
    pub docs: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
}

impl CorpusSpec {
    /// Documents of between one keyword and half the universe.
    pub fn new(keywords: usize, docs: usize) -> Self {
        CorpusSpec {
            keywords,
            docs,
            min_doc_len: 1,
            max_doc_len: (keywords / 2).max(1),
        }
    }
}

/// True when no document is a subset of another (equal documents count as
/// contained).
pub fn is_non_containing(docs: &[Doc]) -> bool {
    docs.iter()
        .enumerate()
        .all(|(i, a)| docs.iter().enumerate().all(|(j, b)| i == j || !a.is_subset(b)))
}

/// Draws documents uniformly at random by size then content, rejecting
/// corpora where one document contains another.
pub fn random_corpus(spec: CorpusSpec, seed: u64) -> Result<Vec<Doc>, LeakageError> {
    if spec.keywords == 0 || spec.min_doc_len == 0 || spec.min_doc_len > spec.max_doc_len || spec.max_doc_len > spec.keywords {
        return Err(LeakageError::BadSpec);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let docs: Vec<Doc> = (0..spec.docs)
            .map(|_| {
                let len = rng.gen_range(spec.min_doc_len..=spec.max_doc_len);
                sample(&mut rng, spec.keywords, len).into_iter().collect()
            })
            .collect();
        if is_non_containing(&docs) {
            return Ok(docs);
        }
    }
    Err(LeakageError::BadSpec)
}

/// Smallest number of keywords of `docs[index]` found in no other document,
/// or `None` when it is contained in another document.
pub fn uniqueness(docs: &[Doc], index: usize) -> Result<Option<usize>, LeakageError> {
    let doc = &docs[index];
    if doc.len() > MAX_UNIQUENESS_DOC {
        return Err(LeakageError::DocumentTooLarge(doc.len()));
    }
    let others: Vec<&Doc> = docs.iter().enumerate().filter(|(i, _)| *i != index).map(|(_, d)| d).collect();
    if others.iter().any(|o| doc.is_subset(o)) {
        return Ok(None);
    }
    let items: Vec<usize> = doc.iter().copied().collect();
    for size in 0..=items.len() {
        let mut found = false;
        for_each_subset(&items, size, &mut |subset| {
            if !found && !others.iter().any(|o| subset.iter().all(|k| o.contains(k))) {
                found = true;
            }
        });
        if found {
            return Ok(Some(size));
        }
    }
    unreachable!("the whole document is unique once no other contains it")
}

fn for_each_subset(items: &[usize], size: usize, f: &mut impl FnMut(&[usize])) {
    fn go(items: &[usize], size: usize, start: usize, acc: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if acc.len() == size {
            f(acc);
            return;
        }
        for i in start..items.len() {
            if items.len() - i < size - acc.len() {
                break;
            }
            acc.push(items[i]);
            go(items, size, i + 1, acc, f);
            acc.pop();
        }
    }
    go(items, size, 0, &mut Vec::with_capacity(size), f);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(ks: &[usize]) -> Doc {
        ks.iter().copied().collect()
    }

    #[test]
    fn uniqueness_by_enumeration() {
        let docs = vec![doc(&[0, 1]), doc(&[2])];
        assert_eq!(uniqueness(&docs, 0).unwrap(), Some(1));
        let docs = vec![doc(&[0, 1]), doc(&[0, 2]), doc(&[1, 2])];
        assert_eq!(uniqueness(&docs, 2).unwrap(), Some(2));
    }

    #[test]
    fn contained_and_identical_are_infinite() {
        let docs = vec![doc(&[0]), doc(&[0, 1])];
        assert_eq!(uniqueness(&docs, 0).unwrap(), None);
        assert_eq!(uniqueness(&docs, 1).unwrap(), Some(1));
        let twins = vec![doc(&[3, 4]), doc(&[3, 4])];
        assert_eq!(uniqueness(&twins, 0).unwrap(), None);
        assert_eq!(uniqueness(&twins, 1).unwrap(), None);
    }

    #[test]
    fn large_documents_refused() {
        let docs = vec![(0..21).collect::<Doc>()];
        assert!(matches!(uniqueness(&docs, 0), Err(LeakageError::DocumentTooLarge(21))));
    }

    #[test]
    fn generator_is_seeded_and_non_containing() {
        let spec = CorpusSpec::new(12, 5);
        let a = random_corpus(spec, 3).unwrap();
        assert_eq!(a, random_corpus(spec, 3).unwrap());
        assert_eq!(a.len(), 5);
        assert!(is_non_containing(&a));
        assert!(a.iter().flatten().all(|&k| k < 12));
    }
}
