//! Server-side state: the bulletin board and the one-time mailboxes.
//!
//! The store keeps only `(addr, ciphertext, time)` triples and broadcast
//! payloads. No operation takes a caller identity.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use datashare_core::cuckoo::{CuckooFilter, CuckooParams};
use parking_lot::Mutex;
use thiserror::Error;

use crate::clock::{Clock, Millis, DAY};

/// Mailbox address length in bytes.
pub const ADDRESS_SIZE: usize = 32;
/// Bytes of an address sent in live notifications.
pub const PREFIX_SIZE: usize = 2;

pub type Address = [u8; ADDRESS_SIZE];
pub type Prefix = [u8; PREFIX_SIZE];

pub fn prefix_of(addr: &Address) -> Prefix {
    [addr[0], addr[1]]
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BulletinEntry {
    pub seq: u64,
    pub posted_at: Millis,
    pub payload: Vec<u8>,
}

#[derive(Clone, Debug)]
struct Mailbox {
    ciphertext: Vec<u8>,
    posted_at: Millis,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreConfig {
    /// Mailbox lifetime.
    pub retention: Millis,
    /// Bulletin entry lifetime.
    pub bulletin_retention: Millis,
    /// Exact ciphertext length accepted by `ph_put`.
    pub envelope_len: usize,
    pub max_broadcast: usize,
    /// Nominal false-positive rate of bulk notification filters.
    pub notification_fpr: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            retention: 7 * DAY,
            bulletin_retention: 30 * DAY,
            envelope_len: 1024 + datashare_core::crypto::AE_OVERHEAD,
            max_broadcast: 4 << 20,
            notification_fpr: 1e-4,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("broadcast of {0} bytes exceeds the size limit")]
    Oversize(usize),
    #[error("ciphertext of {got} bytes, expected {expected}")]
    WrongLength { expected: usize, got: usize },
    #[error("mailbox already used")]
    AddressInUse,
    #[error("storage failure: {0}")]
    Io(String),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Io(e.to_string())
    }
}

/// Cumulative counters and current occupancy.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    pub puts: u64,
    pub gets: u64,
    pub broadcasts: u64,
    pub mailbox_bytes: u64,
    pub peak_mailbox_bytes: u64,
    pub bulletin_bytes: u64,
    pub expired_mailboxes: u64,
}

type Listener = Box<dyn Fn(&Address) + Send + Sync>;

struct Files {
    bulletin: File,
    mailboxes: File,
}

struct Inner {
    bulletin: VecDeque<BulletinEntry>,
    next_seq: u64,
    mailboxes: HashMap<Address, Mailbox>,
    arrivals: VecDeque<(Millis, Address)>,
    listeners: Vec<(u64, Listener)>,
    next_listener: u64,
    files: Option<Files>,
    stats: StoreStats,
}

pub struct Store {
    config: StoreConfig,
    clock: Arc<dyn Clock>,
    inner: Mutex<Inner>,
}

impl Store {
    pub fn new(config: StoreConfig, clock: Arc<dyn Clock>) -> Self {
        Store {
            config,
            clock,
            inner: Mutex::new(Inner {
                bulletin: VecDeque::new(),
                next_seq: 1,
                mailboxes: HashMap::new(),
                arrivals: VecDeque::new(),
                listeners: Vec::new(),
                next_listener: 0,
                files: None,
                stats: StoreStats::default(),
            }),
        }
    }

    /// Opens a store persisted under `dir`, replaying unexpired state.
    ///
    /// `bulletin.log` and `mailboxes.log` are append-only; they are rewritten
    /// without expired records on every open.
    pub fn open(config: StoreConfig, clock: Arc<dyn Clock>, dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let store = Store::new(config, clock);
        let now = store.clock.now();
        let bulletin_path = dir.join("bulletin.log");
        let mailbox_path = dir.join("mailboxes.log");
        {
            let mut inner = store.inner.lock();
            for (seq, posted_at, payload) in read_records::<8>(&bulletin_path)? {
                let seq = u64::from_be_bytes(seq);
                inner.next_seq = inner.next_seq.max(seq + 1);
                if now.saturating_sub(posted_at) < store.config.bulletin_retention {
                    inner.stats.bulletin_bytes += payload.len() as u64;
                    inner.bulletin.push_back(BulletinEntry { seq, posted_at, payload });
                }
            }
            for (addr, posted_at, ciphertext) in read_records::<ADDRESS_SIZE>(&mailbox_path)? {
                if now.saturating_sub(posted_at) < store.config.retention {
                    inner.stats.mailbox_bytes += ciphertext.len() as u64;
                    inner.arrivals.push_back((posted_at, addr));
                    inner.mailboxes.insert(addr, Mailbox { ciphertext, posted_at });
                }
            }
            inner.stats.peak_mailbox_bytes = inner.stats.mailbox_bytes;
            let mut bulletin = rewrite(&bulletin_path)?;
            for e in &inner.bulletin {
                write_record(&mut bulletin, &e.seq.to_be_bytes(), e.posted_at, &e.payload)?;
            }
            let mut mailboxes = rewrite(&mailbox_path)?;
            for (posted_at, addr) in &inner.arrivals {
                write_record(&mut mailboxes, addr, *posted_at, &inner.mailboxes[addr].ciphertext)?;
            }
            bulletin.sync_data()?;
            mailboxes.sync_data()?;
            inner.files = Some(Files { bulletin, mailboxes });
        }
        Ok(store)
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn now(&self) -> Millis {
        self.clock.now()
    }

    fn expire(&self, inner: &mut Inner, now: Millis) {
        while let Some(&(posted_at, addr)) = inner.arrivals.front() {
            if now.saturating_sub(posted_at) < self.config.retention {
                break;
            }
            inner.arrivals.pop_front();
            if let Some(mb) = inner.mailboxes.remove(&addr) {
                inner.stats.mailbox_bytes -= mb.ciphertext.len() as u64;
                inner.stats.expired_mailboxes += 1;
            }
        }
        while let Some(front) = inner.bulletin.front() {
            if now.saturating_sub(front.posted_at) < self.config.bulletin_retention {
                break;
            }
            let e = inner.bulletin.pop_front().unwrap();
            inner.stats.bulletin_bytes -= e.payload.len() as u64;
        }
    }

    /// Appends `payload` to the bulletin board; durable before returning.
    pub fn bb_broadcast(&self, payload: &[u8]) -> Result<u64, StoreError> {
        if payload.len() > self.config.max_broadcast {
            return Err(StoreError::Oversize(payload.len()));
        }
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        self.expire(&mut inner, now);
        let seq = inner.next_seq;
        if let Some(files) = inner.files.as_mut() {
            write_record(&mut files.bulletin, &seq.to_be_bytes(), now, payload)?;
            files.bulletin.sync_data()?;
        }
        inner.next_seq += 1;
        inner.stats.broadcasts += 1;
        inner.stats.bulletin_bytes += payload.len() as u64;
        inner.bulletin.push_back(BulletinEntry {
            seq,
            posted_at: now,
            payload: payload.to_vec(),
        });
        Ok(seq)
    }

    /// Retained entries with `seq > after_seq`, in order.
    pub fn bb_read(&self, after_seq: u64) -> Vec<BulletinEntry> {
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        self.expire(&mut inner, now);
        let start = inner.bulletin.partition_point(|e| e.seq <= after_seq);
        inner.bulletin.range(start..).cloned().collect()
    }

    /// Stores `ciphertext` at the unused mailbox `addr` and notifies every
    /// monitor.
    pub fn ph_put(&self, addr: &Address, ciphertext: &[u8]) -> Result<(), StoreError> {
        if ciphertext.len() != self.config.envelope_len {
            return Err(StoreError::WrongLength {
                expected: self.config.envelope_len,
                got: ciphertext.len(),
            });
        }
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        self.expire(&mut inner, now);
        if inner.mailboxes.contains_key(addr) {
            return Err(StoreError::AddressInUse);
        }
        if let Some(files) = inner.files.as_mut() {
            write_record(&mut files.mailboxes, addr, now, ciphertext)?;
            files.mailboxes.sync_data()?;
        }
        inner.mailboxes.insert(
            *addr,
            Mailbox {
                ciphertext: ciphertext.to_vec(),
                posted_at: now,
            },
        );
        inner.arrivals.push_back((now, *addr));
        inner.stats.puts += 1;
        inner.stats.mailbox_bytes += ciphertext.len() as u64;
        inner.stats.peak_mailbox_bytes = inner.stats.peak_mailbox_bytes.max(inner.stats.mailbox_bytes);
        for (_, listener) in &inner.listeners {
            listener(addr);
        }
        Ok(())
    }

    /// The unexpired ciphertext at `addr`, if any.
    pub fn ph_get(&self, addr: &Address) -> Option<Vec<u8>> {
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        self.expire(&mut inner, now);
        inner.stats.gets += 1;
        inner
            .mailboxes
            .get(addr)
            .filter(|mb| now.saturating_sub(mb.posted_at) < self.config.retention)
            .map(|mb| mb.ciphertext.clone())
    }

    /// Cuckoo filter over every address posted at or after `since`, and the
    /// time it covers up to.
    pub fn monitor_bulk(&self, since: Millis) -> (CuckooFilter, Millis) {
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        self.expire(&mut inner, now);
        let start = inner.arrivals.partition_point(|(t, _)| *t < since);
        let addrs: Vec<&Address> = inner.arrivals.range(start..).map(|(_, a)| a).collect();
        let params = CuckooParams::with_target_fpr(addrs.len(), self.config.notification_fpr);
        let filter = CuckooFilter::compress(&addrs, params).or_else(|_| {
            // A failed build at the default load is retried with twice the buckets.
            let mut bigger = params;
            bigger.bucket_count *= 2;
            CuckooFilter::compress(&addrs, bigger)
        });
        (filter.expect("doubled filter holds the window"), now)
    }

    /// Registers a callback fired for every successful `ph_put`, in arrival
    /// order. Callbacks run under the store lock and must not call back
    /// into the store.
    pub fn subscribe(&self, listener: impl Fn(&Address) + Send + Sync + 'static) -> u64 {
        let mut inner = self.inner.lock();
        let id = inner.next_listener;
        inner.next_listener += 1;
        inner.listeners.push((id, Box::new(listener)));
        id
    }

    pub fn unsubscribe(&self, id: u64) {
        self.inner.lock().listeners.retain(|(i, _)| *i != id);
    }

    pub fn stats(&self) -> StoreStats {
        let now = self.clock.now();
        let mut inner = self.inner.lock();
        self.expire(&mut inner, now);
        inner.stats
    }
}

fn rewrite(path: &PathBuf) -> io::Result<File> {
    let tmp = path.with_extension("tmp");
    File::create(&tmp)?;
    fs::rename(&tmp, path)?;
    OpenOptions::new().append(true).open(path)
}

fn write_record(f: &mut File, key: &[u8], posted_at: Millis, body: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(key.len() + 12 + body.len());
    buf.extend_from_slice(key);
    buf.extend_from_slice(&posted_at.to_be_bytes());
    buf.extend_from_slice(&(body.len() as u32).to_be_bytes());
    buf.extend_from_slice(body);
    f.write_all(&buf)
}

fn read_records<const K: usize>(path: &Path) -> io::Result<Vec<([u8; K], Millis, Vec<u8>)>> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    loop {
        let mut key = [0u8; K];
        match reader.read_exact(&mut key) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        }
        let mut head = [0u8; 12];
        let mut body = Vec::new();
        // A torn final record from a crash is dropped.
        if reader.read_exact(&mut head).is_err() {
            break;
        }
        let len = u32::from_be_bytes(head[8..].try_into().unwrap()) as usize;
        body.resize(len, 0);
        if reader.read_exact(&mut body).is_err() {
            break;
        }
        out.push((key, u64::from_be_bytes(head[..8].try_into().unwrap()), body));
    }
    Ok(out)
}
