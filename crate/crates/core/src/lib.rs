//! Cryptographic core of the Datashare stack: group arithmetic and hashing,
//! multi-set PSI with its baselines, cuckoo filters, and anonymous one-time
//! tokens.

pub mod crypto;
pub mod cuckoo;
mod error;
pub mod mspsi;
pub mod tokens;

pub use error::{CryptoError, CuckooError, MspsiError, TokenError};
