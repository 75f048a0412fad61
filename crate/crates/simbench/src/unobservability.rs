//! Compares what the mailbox server sees when a journalist has a real
//! message queued against a run where it has none.
//!
//! Both runs share a seed. The cover schedule never looks at queue contents,
//! so upload times must coincide exactly; envelopes must all have the same
//! length; addresses must look uniform; and each sender's upload gaps must
//! fit the exponential distribution of the cover rate.

use datashare_pigeonhole::clock::{Millis, DAY, MINUTE};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::ledger::PutRecord;
use crate::messaging::{run_full_stack, FullStackConfig};
use crate::stats::{chi_square_uniform, ks_exponential};
use crate::{SimError, START};

#[derive(Clone, Debug, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub uploads: usize,
    /// Every envelope in either run had the same length.
    pub lengths_identical: bool,
    /// Both runs uploaded at exactly the same times, from the same parties.
    pub times_identical: bool,
    /// KS p-value of the sender's upload gaps against the cover rate.
    pub ks_p: f64,
    /// Real messages the recipient decrypted in the real run.
    pub delivered: usize,
    pub real_messages: usize,
    /// Counts of the 16 nibble values over every address byte of the sender's
    /// uploads in the real run.
    pub nibbles: [u64; 16],
}

/// Transcripts of one seed: `(real run, silent run)`.
pub fn transcripts(seed: u64, rate: f64, days: f64, messages: usize) -> Result<(Vec<PutRecord>, Vec<PutRecord>, usize), SimError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x756e_6f62);
    let span = (days * DAY as f64 * 0.8) as Millis;
    let mut script: Vec<(Millis, usize, usize)> = (0..messages).map(|_| (rng.gen_range(0..span), 0, 1)).collect();
    script.sort();
    let mut cfg = FullStackConfig::new(2, rate, days, seed).cover_only();
    cfg.record_transcript = true;
    let silent = run_full_stack(&cfg)?;
    cfg.scripted = script;
    let real = run_full_stack(&cfg)?;
    Ok((real.transcript, silent.transcript, real.delivery_latency_min.len()))
}

pub fn run_seed(seed: u64, rate: f64, days: f64, messages: usize) -> Result<SeedOutcome, SimError> {
    let (real, silent, delivered) = transcripts(seed, rate, days, messages)?;
    let lengths_identical = real
        .iter()
        .chain(&silent)
        .all(|p| p.len == real.first().map_or(p.len, |f| f.len));
    let timeline = |t: &[PutRecord]| t.iter().map(|p| (p.at, p.party)).collect::<Vec<_>>();
    let times_identical = timeline(&real) == timeline(&silent);

    let sender: Vec<&PutRecord> = real.iter().filter(|p| p.party == 0).collect();
    let mut gaps = Vec::with_capacity(sender.len());
    let mut last = START;
    for p in &sender {
        gaps.push((p.at - last) as f64 / MINUTE as f64);
        last = p.at;
    }
    let per_minute = rate / (DAY / MINUTE) as f64;
    let (_, ks_p) = ks_exponential(&gaps, per_minute);

    let mut nibbles = [0u64; 16];
    for p in &sender {
        for b in p.addr {
            nibbles[(b >> 4) as usize] += 1;
            nibbles[(b & 0xf) as usize] += 1;
        }
    }
    Ok(SeedOutcome {
        seed,
        uploads: real.len(),
        lengths_identical,
        times_identical,
        ks_p,
        delivered,
        real_messages: messages,
        nibbles,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteOutcome {
    pub seeds: Vec<SeedOutcome>,
    /// Chi-square p-value of the pooled nibble counts.
    pub address_p: f64,
}

impl SuiteOutcome {
    pub fn lengths_identical(&self) -> bool {
        self.seeds.iter().all(|s| s.lengths_identical)
    }

    pub fn times_identical(&self) -> bool {
        self.seeds.iter().all(|s| s.times_identical)
    }

    pub fn ks_passing(&self, alpha: f64) -> usize {
        self.seeds.iter().filter(|s| s.ks_p > alpha).count()
    }

    pub fn all_delivered(&self) -> bool {
        self.seeds.iter().all(|s| s.delivered == s.real_messages)
    }
}

pub fn run_suite(seeds: impl IntoIterator<Item = u64>, rate: f64, days: f64, messages: usize) -> Result<SuiteOutcome, SimError> {
    let seeds = seeds
        .into_iter()
        .map(|s| run_seed(s, rate, days, messages))
        .collect::<Result<Vec<_>, _>>()?;
    let mut pooled = [0u64; 16];
    for s in &seeds {
        for (p, c) in pooled.iter_mut().zip(s.nibbles) {
            *p += c;
        }
    }
    let (_, address_p) = chi_square_uniform(&pooled);
    Ok(SuiteOutcome { seeds, address_p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queued_message_leaves_no_trace_in_timing() {
        let s = run_seed(3, 48.0, 2.0, 3).unwrap();
        assert!(s.lengths_identical);
        assert!(s.times_identical);
        assert_eq!(s.delivered, 3);
        assert!(s.uploads > 100);
    }
}
