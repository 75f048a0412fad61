//! Deterministic simulations and instrumented benchmarks for the search and
//! messaging stack.
//!
//! Everything here runs on simulated time. Two runs with the same seed and
//! configuration produce the same transcripts, counters and trace hashes;
//! only the informational wall-clock figures differ.

pub mod clock;
pub mod e2e;
pub mod ledger;
pub mod messaging;
pub mod psi;
pub mod stats;
pub mod unobservability;

use datashare_pigeonhole::clock::{Millis, DAY};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use clock::VirtualClock;
pub use ledger::{CostLedger, CountingServer, EnvelopeBalance, PartyCosts, SharedLedger};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    BadConfig(&'static str),
    #[error(transparent)]
    Mspsi(#[from] datashare_core::MspsiError),
    #[error(transparent)]
    Cuckoo(#[from] datashare_core::CuckooError),
    #[error(transparent)]
    Token(#[from] datashare_core::TokenError),
    #[error(transparent)]
    Messaging(#[from] datashare_messaging::MessagingError),
    #[error(transparent)]
    Comm(#[from] datashare_pigeonhole::CommError),
    #[error(transparent)]
    Node(#[from] datashare_node::NodeError),
    #[error("simulation diverged: {0}")]
    Diverged(String),
}

/// One simulated deployment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub journalists: usize,
    /// Cover messages per day to each recipient.
    pub cover_rate: f64,
    /// Cover-key refreshes per day. Defaults to a quarter of the cover rate.
    pub key_rate: Option<f64>,
    pub docs_per_journalist: usize,
    pub keywords_per_doc: usize,
    /// Distinct keywords the corpora and queries draw from.
    pub vocabulary: usize,
    pub queries_per_day: f64,
    pub days: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            journalists: 10,
            cover_rate: 48.0,
            key_rate: None,
            docs_per_journalist: 200,
            keywords_per_doc: 20,
            vocabulary: 2000,
            queries_per_day: 2.0,
            days: 1.0,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn key_rate(&self) -> f64 {
        self.key_rate.unwrap_or(self.cover_rate / 4.0)
    }

    pub fn duration(&self) -> Millis {
        (self.days * DAY as f64) as Millis
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.journalists < 2 {
            return Err(SimError::BadConfig("need at least two journalists"));
        }
        if !(self.cover_rate > 0.0 && self.key_rate() > 0.0) {
            return Err(SimError::BadConfig("rates must be positive"));
        }
        if !(self.days > 0.0) {
            return Err(SimError::BadConfig("duration must be positive"));
        }
        if self.docs_per_journalist == 0 || self.keywords_per_doc == 0 || self.vocabulary < self.keywords_per_doc {
            return Err(SimError::BadConfig("corpus shape is empty or larger than the vocabulary"));
        }
        if !(self.queries_per_day >= 0.0) {
            return Err(SimError::BadConfig("query rate must be non-negative"));
        }
        Ok(())
    }
}

/// Simulated start time. Far enough from zero that nothing clamps.
pub const START: Millis = 400 * DAY;

/// Bytes in a (decimal) megabyte, as used in all reported figures.
pub const MB: f64 = 1e6;
