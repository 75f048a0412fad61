//! Search oracles over a hidden corpus. Each counts the queries it answers.
//!
//! Keywords are indices `0..n` into a universe; a document is the set of
//! indices it contains.

use std::collections::BTreeSet;

use datashare_core::mspsi::{self, Corpus, Keyword, OpCounts, ServerKey, TagCollection, TagMembership};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::LeakageError;

pub type Doc = BTreeSet<usize>;

/// Anything that can say whether some document contains a keyword set.
pub trait BooleanOracle {
    fn any_contains(&mut self, keywords: &Doc) -> bool;
    fn queries(&self) -> u64;
}

pub struct OneBitOracle<'a> {
    docs: &'a [Doc],
    queries: u64,
}

impl<'a> OneBitOracle<'a> {
    pub fn new(docs: &'a [Doc]) -> Self {
        OneBitOracle { docs, queries: 0 }
    }

    pub fn query(&mut self, keywords: &Doc) -> bool {
        self.queries += 1;
        self.docs.iter().any(|d| keywords.is_subset(d))
    }
}

impl BooleanOracle for OneBitOracle<'_> {
    fn any_contains(&mut self, keywords: &Doc) -> bool {
        self.query(keywords)
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}

pub struct NumDocOracle<'a> {
    docs: &'a [Doc],
    queries: u64,
}

impl<'a> NumDocOracle<'a> {
    pub fn new(docs: &'a [Doc]) -> Self {
        NumDocOracle { docs, queries: 0 }
    }

    pub fn query(&mut self, keywords: &Doc) -> usize {
        self.queries += 1;
        self.docs.iter().filter(|d| keywords.is_subset(d)).count()
    }
}

impl BooleanOracle for NumDocOracle<'_> {
    fn any_contains(&mut self, keywords: &Doc) -> bool {
        self.query(keywords) > 0
    }

    fn queries(&self) -> u64 {
        self.queries
    }
}

/// Answers with what a querier learns from one real MS-PSI run: for each
/// queried keyword, which document indices hold its tag.
pub struct MspsiOracle {
    key: ServerKey,
    tags: TagCollection,
    lim: usize,
    rng: ChaCha20Rng,
    queries: u64,
}

pub fn keyword_bytes(index: usize) -> Keyword {
    format!("kw-{index}").into_bytes()
}

impl MspsiOracle {
    pub fn new(docs: &[Doc], lim: usize, seed: u64) -> Result<Self, LeakageError> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let key = ServerKey::generate(&mut rng);
        let corpus = Corpus::new(docs.iter().map(|d| d.iter().map(|&k| keyword_bytes(k)).collect::<Vec<_>>()));
        let tags = mspsi::precompute(&corpus, &key)?;
        Ok(MspsiOracle {
            key,
            tags,
            lim,
            rng,
            queries: 0,
        })
    }

    pub fn lim(&self) -> usize {
        self.lim
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }

    /// `result[j][d]` is whether document `d` contains `keywords[j]`.
    pub fn query(&mut self, keywords: &[usize]) -> Result<Vec<Vec<bool>>, LeakageError> {
        if keywords.len() > self.lim {
            return Err(LeakageError::OverLimit {
                got: keywords.len(),
                lim: self.lim,
            });
        }
        self.queries += 1;
        let words: Vec<Keyword> = keywords.iter().map(|&k| keyword_bytes(k)).collect();
        let (blinded, secret) = mspsi::blind(&words, &mut self.rng)?;
        let reply = mspsi::reply(&blinded, &self.key);
        let pretags = mspsi::unblind(&reply, &secret, &mut OpCounts::default())?;
        Ok(pretags
            .iter()
            .map(|p| {
                let p = p.to_bytes();
                (1..=self.tags.doc_count())
                    .map(|d| self.tags.contains_tag(&mspsi::encoded_document_tag(d, &p)))
                    .collect()
            })
            .collect())
    }
}
