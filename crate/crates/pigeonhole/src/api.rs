//! The operations a client sees, independent of transport.

use std::sync::mpsc;
use std::sync::Arc;

use datashare_core::cuckoo::CuckooFilter;
use thiserror::Error;

use crate::clock::Millis;
use crate::store::{prefix_of, Address, BulletinEntry, Prefix, Store, StoreError};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CommError {
    #[error(transparent)]
    Rejected(#[from] StoreError),
    #[error("transport failure: {0}")]
    Transport(String),
}

impl From<std::io::Error> for CommError {
    fn from(e: std::io::Error) -> Self {
        CommError::Transport(e.to_string())
    }
}

/// A running notification subscription. Dropping it ends the feed.
pub struct Monitor {
    /// Every address posted between the requested start and `as_of`.
    pub bulk: CuckooFilter,
    pub as_of: Millis,
    /// Prefixes of later posts, in arrival order. May repeat entries that
    /// are also in `bulk`.
    pub feed: mpsc::Receiver<Prefix>,
    _guard: Box<dyn Send>,
}

impl Monitor {
    pub fn new(bulk: CuckooFilter, as_of: Millis, feed: mpsc::Receiver<Prefix>, guard: impl Send + 'static) -> Self {
        Monitor {
            bulk,
            as_of,
            feed,
            _guard: Box::new(guard),
        }
    }
}

pub trait CommServer: Send + Sync {
    fn broadcast(&self, payload: &[u8]) -> Result<u64, CommError>;
    fn read(&self, after_seq: u64) -> Result<Vec<BulletinEntry>, CommError>;
    fn put(&self, addr: &Address, ciphertext: &[u8]) -> Result<(), CommError>;
    fn get(&self, addr: &Address) -> Result<Option<Vec<u8>>, CommError>;
    fn monitor(&self, since: Millis) -> Result<Monitor, CommError>;
}

struct Subscription {
    store: Arc<Store>,
    id: u64,
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.store.unsubscribe(self.id);
    }
}

impl CommServer for Arc<Store> {
    fn broadcast(&self, payload: &[u8]) -> Result<u64, CommError> {
        Ok(self.bb_broadcast(payload)?)
    }

    fn read(&self, after_seq: u64) -> Result<Vec<BulletinEntry>, CommError> {
        Ok(self.bb_read(after_seq))
    }

    fn put(&self, addr: &Address, ciphertext: &[u8]) -> Result<(), CommError> {
        Ok(self.ph_put(addr, ciphertext)?)
    }

    fn get(&self, addr: &Address) -> Result<Option<Vec<u8>>, CommError> {
        Ok(self.ph_get(addr))
    }

    fn monitor(&self, since: Millis) -> Result<Monitor, CommError> {
        let (tx, rx) = mpsc::channel();
        // Subscribing first means a put racing the bulk build shows up at
        // least once.
        let id = self.subscribe(move |addr| {
            let _ = tx.send(prefix_of(addr));
        });
        let (bulk, as_of) = self.monitor_bulk(since);
        Ok(Monitor::new(bulk, as_of, rx, Subscription { store: self.clone(), id }))
    }
}
