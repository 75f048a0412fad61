//! System-wide parameters and the organization's setup.

use datashare_core::crypto::{GroupElement, GroupParams};
use datashare_core::tokens::{Issuer, IssuerKeys, RateLimitPolicy};
use datashare_pigeonhole::clock::{Millis, DAY};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

/// Keywords per query, real plus padding.
pub const DEFAULT_LIM: usize = 10;
/// Target false-positive rate of record filters.
pub const DEFAULT_RECORD_FPR: f64 = 4e-5;
pub const DEFAULT_COVER_RATE: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub group: GroupParams,
    pub record_fpr: f64,
    pub lim: usize,
    /// Token issuer public key.
    pub mpk: GroupElement,
    pub policy: RateLimitPolicy,
    /// Address of the communication server.
    pub server: String,
    /// Cover messages per recipient per day.
    pub cover_rate: f64,
    /// Queries older than this are not answered.
    pub query_lifetime: Millis,
    /// How often nodes rotate their contact key.
    pub key_rotation: Millis,
}

impl SystemConfig {
    const MAGIC: &'static [u8; 4] = b"DSSP";

    pub fn new(mpk: GroupElement, server: impl Into<String>) -> Self {
        SystemConfig {
            group: GroupParams::default(),
            record_fpr: DEFAULT_RECORD_FPR,
            lim: DEFAULT_LIM,
            mpk,
            policy: RateLimitPolicy::default(),
            server: server.into(),
            cover_rate: DEFAULT_COVER_RATE,
            query_lifetime: 7 * DAY,
            key_rotation: 7 * DAY,
        }
    }

    /// Encoding used to publish the parameters on the bulletin board.
    pub fn to_bulletin(&self) -> Vec<u8> {
        let mut out = Self::MAGIC.to_vec();
        out.extend(serde_json::to_vec(self).expect("config serializes"));
        out
    }

    pub fn from_bulletin(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes.strip_prefix(Self::MAGIC)?).ok()
    }
}

/// What the organization holds after setup: the public parameters and the
/// token issuer with its secret key.
pub struct Organization {
    pub config: SystemConfig,
    pub issuer: Issuer,
}

pub fn system_setup<R: RngCore + CryptoRng>(server: &str, policy: RateLimitPolicy, rng: &mut R) -> Organization {
    let keys = IssuerKeys::setup(rng);
    let mut config = SystemConfig::new(*keys.mpk(), server);
    config.policy = policy;
    Organization {
        config,
        issuer: Issuer::new(keys, policy),
    }
}
