//! Cost comparison of the three multi-set PSI variants on one synthetic
//! scenario: `N` server sets with `S` elements in total, queried with `m`
//! client keywords.

use std::collections::BTreeSet;
use std::time::Instant;

use datashare_core::crypto::ELEMENT_SIZE;
use datashare_core::cuckoo::{CuckooFilter, CuckooParams};
use datashare_core::mspsi::baseline::{vanilla_psi, CpsiKeying, CpsiServer};
use datashare_core::mspsi::{self, Corpus, Keyword, OpCounts, ServerKey};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::SimError;

#[derive(Clone, Debug, Default, Serialize)]
pub struct VariantCosts {
    pub name: &'static str,
    pub server_offline: OpCounts,
    pub server_online: OpCounts,
    pub client_online: OpCounts,
    /// Bytes exchanged once per server, before any query.
    pub offline_bytes: u64,
    /// Bytes exchanged per query.
    pub online_bytes: u64,
    pub offline_ms: f64,
    pub online_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PsiBench {
    pub m: usize,
    pub sets: usize,
    pub elements: usize,
    pub mspsi: VariantCosts,
    pub cpsi: VariantCosts,
    pub vanilla: VariantCosts,
    /// Every variant found the same per-set intersection sizes.
    pub agree: bool,
}

fn keyword(set: usize, j: usize) -> Keyword {
    format!("s{set}-k{j}").into_bytes()
}

/// `n` sets of `s / n` distinct elements each (all elements different), and
/// `m` query keywords of which about half occur in some set.
pub fn scenario(m: usize, n: usize, s: usize, seed: u64) -> (Vec<BTreeSet<Keyword>>, Vec<Keyword>) {
    use rand::Rng;
    let per = s / n;
    let sets: Vec<BTreeSet<Keyword>> = (0..n).map(|i| (0..per).map(|j| keyword(i, j)).collect()).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let query = (0..m)
        .map(|q| {
            if q % 2 == 0 && per > 0 {
                keyword(rng.gen_range(0..n), rng.gen_range(0..per))
            } else {
                format!("absent-{q}").into_bytes()
            }
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    (sets, query)
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub fn run_psi_bench(m: usize, n: usize, s: usize, seed: u64) -> Result<PsiBench, SimError> {
    if m == 0 || n == 0 || s < n {
        return Err(SimError::BadConfig("need m ≥ 1, N ≥ 1 and S ≥ N"));
    }
    let (sets, query) = scenario(m, n, s, seed);
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7073_69);

    // MS-PSI: one key, per-document tags, one exchange for all sets.
    let mut ms_costs = VariantCosts {
        name: "ms-psi",
        ..VariantCosts::default()
    };
    let key = ServerKey::generate(&mut rng);
    let corpus = Corpus::new(sets.iter().map(|d| d.iter().cloned()));
    let t = Instant::now();
    let tags = mspsi::precompute_counted(&corpus, &key, &mut ms_costs.server_offline)?;
    let filter = CuckooFilter::compress(tags.tags(), CuckooParams::for_elements(tags.len()))?;
    ms_costs.offline_ms = ms(t);
    ms_costs.offline_bytes = filter.to_bytes().len() as u64;
    let t = Instant::now();
    let (blinded, secret) = mspsi::blind_counted(&query, query.len(), &mut rng, &mut ms_costs.client_online)?;
    let reply = mspsi::reply_counted(&blinded, &key, &mut ms_costs.server_online);
    let result = mspsi::process_counted(&reply, &secret, &tags, tags.doc_count(), &mut ms_costs.client_online)?;
    ms_costs.online_ms = ms(t);
    ms_costs.online_bytes = ((blinded.len() + reply.len()) * ELEMENT_SIZE) as u64;

    // Client-server PSI: per-set keys, one exchange per set.
    let t = Instant::now();
    let cpsi = CpsiServer::precompute(&sets, CpsiKeying::PerSet, &mut rng);
    let offline_ms = ms(t);
    let t = Instant::now();
    let (c_out, c) = cpsi.run(&query, &mut rng);
    let cpsi_costs = VariantCosts {
        name: "c-psi",
        server_offline: cpsi.precompute,
        server_online: c.server,
        client_online: c.client,
        offline_bytes: sets.iter().map(|s| s.len() as u64).sum::<u64>() * mspsi::TAG_SIZE as u64,
        online_bytes: c.comm_elements * ELEMENT_SIZE as u64,
        offline_ms,
        online_ms: ms(t),
    };

    // Vanilla DH-PSI per set: nothing precomputed, tags shipped per query.
    let t = Instant::now();
    let (v_out, v) = vanilla_psi(&query, &sets, &mut rng);
    let vanilla_costs = VariantCosts {
        name: "vanilla",
        server_offline: OpCounts::default(),
        server_online: v.server,
        client_online: v.client,
        offline_bytes: 0,
        online_bytes: v.comm_elements * ELEMENT_SIZE as u64,
        offline_ms: 0.0,
        online_ms: ms(t),
    };

    let sizes = |out: &[BTreeSet<Keyword>]| out.iter().map(BTreeSet::len).collect::<Vec<_>>();
    let agree = result.sizes == sizes(&c_out) && result.sizes == sizes(&v_out);
    Ok(PsiBench {
        m: query.len(),
        sets: n,
        elements: corpus.total_elements(),
        mspsi: ms_costs,
        cpsi: cpsi_costs,
        vanilla: vanilla_costs,
        agree,
    })
}

impl PsiBench {
    pub const CSV_HEADER: &'static str = "variant,m,N,S,server_offline_exp,server_online_exp,server_online_hash_to_group,\
client_online_exp,client_online_tag_hashes,offline_bytes,online_bytes,offline_ms,online_ms";

    pub fn csv_rows(&self) -> Vec<String> {
        [&self.mspsi, &self.cpsi, &self.vanilla]
            .iter()
            .map(|v| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{:.1},{:.3}",
                    v.name,
                    self.m,
                    self.sets,
                    self.elements,
                    v.server_offline.exponentiations,
                    v.server_online.exponentiations,
                    v.server_online.group_hashes,
                    v.client_online.exponentiations,
                    v.client_online.tag_hashes,
                    v.offline_bytes,
                    v.online_bytes,
                    v.offline_ms,
                    v.online_ms
                )
            })
            .collect()
    }
}
