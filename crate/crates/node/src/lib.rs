//! A journalist's node: publishing a searchable record of their documents,
//! querying other journalists' records, answering queries, and talking to
//! whoever matched, all over one communication server.

pub mod config;
pub mod corpus;
pub mod identity;
pub mod node;
pub mod persist;
pub mod wire;

use datashare_core::{CryptoError, CuckooError, MspsiError, TokenError};
use datashare_messaging::MessagingError;
use datashare_pigeonhole::CommError;
use thiserror::Error;

pub use config::{system_setup, Organization, SystemConfig, DEFAULT_LIM};
pub use identity::{journalist_setup, JournalistIdentity, SavedIdentity};
pub use node::{ChatLine, Conversation, MatchReport, Node, NodeMetrics, NodeSnapshot, Notice, OutstandingQuery, WatchTag};
pub use wire::{Announcement, PublishedQuery, Record};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("query has {got} keywords; at most {lim} are allowed")]
    TooManyKeywords { got: usize, lim: usize },
    #[error("query has no keywords")]
    NoKeywords,
    #[error("corpus has no documents with keywords")]
    EmptyCorpus,
    #[error("nothing has been published yet")]
    NotPublished,
    #[error("no conversation with that peer")]
    UnknownPeer,
    #[error("malformed data: {0}")]
    Malformed(&'static str),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Mspsi(#[from] MspsiError),
    #[error(transparent)]
    Cuckoo(#[from] CuckooError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Messaging(#[from] MessagingError),
    #[error(transparent)]
    Comm(#[from] CommError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
