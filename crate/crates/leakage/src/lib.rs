//! How much of a private corpus a searcher can reconstruct, depending on
//! what each search reveals: one bit, a document count, or per-document
//! matches as in multi-set PSI.

pub mod corpus;
pub mod extract;
pub mod oracle;

use datashare_core::MspsiError;
use thiserror::Error;

pub use corpus::{is_non_containing, random_corpus, uniqueness, CorpusSpec};
pub use extract::{extract_mspsi, extract_num_doc, extract_one_bit, recover_document, Recovery};
pub use oracle::{BooleanOracle, Doc, MspsiOracle, NumDocOracle, OneBitOracle};

#[derive(Debug, Error)]
pub enum LeakageError {
    #[error("query of {got} keywords exceeds the limit of {lim}")]
    OverLimit { got: usize, lim: usize },
    #[error("document of {0} keywords is too large to enumerate")]
    DocumentTooLarge(usize),
    #[error("corpus parameters cannot be satisfied")]
    BadSpec,
    #[error(transparent)]
    Mspsi(#[from] MspsiError),
}
