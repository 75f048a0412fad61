//! Baselines for the multi-set setting: the vanilla DH-PSI run once per
//! server set, and client-server PSI with precomputed per-set tags.
//!
//! Both are used for cost comparison only. Communication is reported in
//! element units, counting a tag as one element.

use std::collections::{BTreeSet, HashSet};

use rand_core::{CryptoRng, RngCore};

use super::{Keyword, OpCounts, ServerKey, Tag, TAG_SIZE};
use crate::crypto::{hash_bytes, hash_to_group, Domain, GroupElement, Scalar};

/// Counters of both parties and the exchanged element count.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PsiCosts {
    pub client: OpCounts,
    pub server: OpCounts,
    /// Elements (or tags) sent in either direction.
    pub comm_elements: u64,
}

/// Single-set tag `H(y^s)`, no set index.
pub fn plain_tag(pretag: &GroupElement) -> Tag {
    let digest = hash_bytes(Domain::PlainTag, &[pretag.to_bytes()]);
    let mut t = [0u8; TAG_SIZE];
    t.copy_from_slice(&digest[..TAG_SIZE]);
    Tag(t)
}

fn server_tags(set: &BTreeSet<Keyword>, key: &ServerKey, counts: &mut OpCounts) -> HashSet<Tag> {
    set.iter()
        .map(|y| {
            counts.group_hashes += 1;
            counts.exponentiations += 1;
            counts.tag_hashes += 1;
            plain_tag(&hash_to_group(y).pow(key.scalar()))
        })
        .collect()
}

/// One client-server exchange against a single set's tags: blind, reply,
/// unblind, probe.
fn online_exchange<R: RngCore + CryptoRng>(
    client: &[Keyword],
    tags: &HashSet<Tag>,
    key: &ServerKey,
    rng: &mut R,
    costs: &mut PsiCosts,
) -> BTreeSet<Keyword> {
    let c = Scalar::random_nonzero(rng);
    let blinded: Vec<GroupElement> = client
        .iter()
        .map(|x| {
            costs.client.group_hashes += 1;
            costs.client.exponentiations += 1;
            hash_to_group(x).pow(&c)
        })
        .collect();
    let replied: Vec<GroupElement> = blinded
        .iter()
        .map(|e| {
            costs.server.exponentiations += 1;
            e.pow(key.scalar())
        })
        .collect();
    costs.comm_elements += 2 * client.len() as u64;
    let c_inv = c.invert().expect("non-zero blinding factor");
    client
        .iter()
        .zip(&replied)
        .filter(|(_, r)| {
            costs.client.exponentiations += 1;
            costs.client.tag_hashes += 1;
            tags.contains(&plain_tag(&r.pow(&c_inv)))
        })
        .map(|(x, _)| x.clone())
        .collect()
}

/// Vanilla PSI run independently against each server set: every run
/// recomputes and ships the set's tags under a fresh server key.
pub fn vanilla_psi<R: RngCore + CryptoRng>(
    client: &[Keyword],
    sets: &[BTreeSet<Keyword>],
    rng: &mut R,
) -> (Vec<BTreeSet<Keyword>>, PsiCosts) {
    let mut costs = PsiCosts::default();
    let out = sets
        .iter()
        .map(|set| {
            let key = ServerKey::generate(rng);
            let tags = server_tags(set, &key, &mut costs.server);
            costs.comm_elements += tags.len() as u64;
            online_exchange(client, &tags, &key, rng, &mut costs)
        })
        .collect();
    (out, costs)
}

/// How a client-server PSI server keys its sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpsiKeying {
    /// Independent long-term key per set.
    PerSet,
    /// One long-term key for every set. Identical keywords in different sets
    /// map to identical tags.
    Shared,
}

/// A client-server PSI server with precomputed per-set tag collections.
pub struct CpsiServer {
    keys: Vec<ServerKey>,
    tags: Vec<HashSet<Tag>>,
    /// Precomputation cost.
    pub precompute: OpCounts,
}

impl CpsiServer {
    pub fn precompute<R: RngCore + CryptoRng>(sets: &[BTreeSet<Keyword>], keying: CpsiKeying, rng: &mut R) -> Self {
        let shared = ServerKey::generate(rng);
        let mut precompute = OpCounts::default();
        let keys: Vec<ServerKey> = sets
            .iter()
            .map(|_| match keying {
                CpsiKeying::PerSet => ServerKey::generate(rng),
                CpsiKeying::Shared => shared.clone(),
            })
            .collect();
        let tags = sets
            .iter()
            .zip(&keys)
            .map(|(set, key)| server_tags(set, key, &mut precompute))
            .collect();
        CpsiServer { keys, tags, precompute }
    }

    /// Tags of set `index` (0-based).
    pub fn tags(&self, index: usize) -> &HashSet<Tag> {
        &self.tags[index]
    }

    /// Online phase: one exchange per set.
    pub fn run<R: RngCore + CryptoRng>(&self, client: &[Keyword], rng: &mut R) -> (Vec<BTreeSet<Keyword>>, PsiCosts) {
        let mut costs = PsiCosts::default();
        let out = self
            .tags
            .iter()
            .zip(&self.keys)
            .map(|(tags, key)| online_exchange(client, tags, key, rng, &mut costs))
            .collect();
        (out, costs)
    }
}
