//! Cost accounting: per-party counters and a transport wrapper that charges
//! every call its serialized frame size.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use datashare_core::mspsi::OpCounts;
use datashare_messaging::CoverAnnouncement;
use datashare_pigeonhole::clock::Millis;
use datashare_pigeonhole::store::{Address, ADDRESS_SIZE, PREFIX_SIZE};
use datashare_pigeonhole::wire::{self, Frame};
use datashare_pigeonhole::{BulletinEntry, CommError, CommServer, Monitor, Store};
use parking_lot::Mutex;
use serde::Serialize;

/// Bytes of a frame whose fields have the given lengths.
pub fn frame_len(fields: &[usize]) -> u64 {
    (4 + 1 + fields.iter().map(|f| 4 + f).sum::<usize>()) as u64
}

pub fn put_request_len(envelope: usize) -> u64 {
    frame_len(&[ADDRESS_SIZE, envelope])
}

pub fn put_response_len() -> u64 {
    frame_len(&[])
}

pub fn get_request_len() -> u64 {
    frame_len(&[ADDRESS_SIZE])
}

pub fn get_response_len(found: Option<usize>) -> u64 {
    match found {
        Some(n) => frame_len(&[n]),
        None => frame_len(&[]),
    }
}

pub fn broadcast_request_len(payload: usize) -> u64 {
    frame_len(&[payload])
}

pub fn broadcast_response_len() -> u64 {
    frame_len(&[8])
}

pub fn read_request_len() -> u64 {
    frame_len(&[8])
}

pub fn read_response_len(entries: &[BulletinEntry]) -> u64 {
    Frame::new(wire::RESPONSE_BIT | wire::OP_READ, wire::encode_entries(entries))
        .encode()
        .len() as u64
}

/// Bytes one bulletin entry adds to a read response.
pub fn entry_len(payload: usize) -> u64 {
    frame_len(&[8, 8, payload]) - frame_len(&[])
}

fn is_cover_key(payload: &[u8]) -> bool {
    payload.starts_with(CoverAnnouncement::MAGIC)
}

/// One batch of `k` notification prefixes on the monitor stream.
pub fn feed_frame_len(k: usize) -> u64 {
    frame_len(&[1, k * PREFIX_SIZE])
}

/// Counters for one party. Every counter only grows.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PartyCosts {
    pub exponentiations: u64,
    pub group_hashes: u64,
    pub tag_hashes: u64,
    /// Serialized frame bytes written and read, padding included.
    pub wire_sent: u64,
    pub wire_received: u64,
    /// Content bytes before padding and framing, where the sender knows them.
    pub raw_sent: u64,
    pub raw_received: u64,
    pub puts: u64,
    pub gets: u64,
    pub hits: u64,
    pub broadcasts: u64,
    pub reads: u64,
    pub notifications: u64,
    /// Wire bytes of bulletin broadcasts and reads.
    pub bulletin_wire: u64,
    /// The part of `bulletin_wire` carrying cover-key announcements.
    pub cover_key_wire: u64,
    /// Bytes the party keeps at the server (bulletin entries and mailboxes).
    pub storage_bytes: u64,
}

impl PartyCosts {
    pub fn add_ops(&mut self, ops: &OpCounts) {
        self.exponentiations += ops.exponentiations;
        self.group_hashes += ops.group_hashes;
        self.tag_hashes += ops.tag_hashes;
    }

    pub fn wire_total(&self) -> u64 {
        self.wire_sent + self.wire_received
    }

    pub fn merge(&mut self, o: &PartyCosts) {
        self.exponentiations += o.exponentiations;
        self.group_hashes += o.group_hashes;
        self.tag_hashes += o.tag_hashes;
        self.wire_sent += o.wire_sent;
        self.wire_received += o.wire_received;
        self.raw_sent += o.raw_sent;
        self.raw_received += o.raw_received;
        self.puts += o.puts;
        self.gets += o.gets;
        self.hits += o.hits;
        self.broadcasts += o.broadcasts;
        self.reads += o.reads;
        self.notifications += o.notifications;
        self.bulletin_wire += o.bulletin_wire;
        self.cover_key_wire += o.cover_key_wire;
        self.storage_bytes += o.storage_bytes;
    }
}

/// Where every uploaded envelope byte currently is.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EnvelopeBalance {
    pub uploaded: u64,
    pub fetched: u64,
    pub stored: u64,
    pub expired: u64,
}

impl EnvelopeBalance {
    /// Every uploaded byte is fetched once, waiting, or expired.
    pub fn conserved(&self) -> bool {
        self.uploaded == self.fetched + self.stored + self.expired
    }
}

/// One upload as the server sees it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PutRecord {
    pub at: Millis,
    pub party: usize,
    pub addr: Address,
    pub len: usize,
}

#[derive(Default)]
pub struct CostLedger {
    pub parties: Vec<PartyCosts>,
    /// Every accepted upload, when recording is switched on.
    pub transcript: Option<Vec<PutRecord>>,
    pending: BTreeMap<Address, (Millis, u64)>,
    fetched: HashSet<Address>,
    balance: EnvelopeBalance,
}

impl CostLedger {
    pub fn new(parties: usize) -> Self {
        CostLedger {
            parties: vec![PartyCosts::default(); parties],
            ..CostLedger::default()
        }
    }

    pub fn recording(mut self) -> Self {
        self.transcript = Some(Vec::new());
        self
    }

    pub fn party(&mut self, i: usize) -> &mut PartyCosts {
        if i >= self.parties.len() {
            self.parties.resize(i + 1, PartyCosts::default());
        }
        &mut self.parties[i]
    }

    pub fn total(&self) -> PartyCosts {
        let mut t = PartyCosts::default();
        for p in &self.parties {
            t.merge(p);
        }
        t
    }

    fn uploaded(&mut self, addr: Address, at: Millis, len: u64) {
        self.balance.uploaded += len;
        self.pending.insert(addr, (at, len));
    }

    /// Returns whether this is the first fetch of `addr`.
    fn fetched(&mut self, addr: &Address, len: u64) -> bool {
        if !self.fetched.insert(*addr) {
            return false;
        }
        if self.pending.remove(addr).is_some() {
            self.balance.fetched += len;
        }
        true
    }

    /// Moves envelopes older than `retention` from stored to expired.
    pub fn expire(&mut self, now: Millis, retention: Millis) {
        let old: Vec<Address> = self
            .pending
            .iter()
            .filter(|(_, (at, _))| now.saturating_sub(*at) >= retention)
            .map(|(a, _)| *a)
            .collect();
        for a in old {
            let (_, len) = self.pending.remove(&a).unwrap();
            self.balance.expired += len;
        }
    }

    pub fn balance(&self) -> EnvelopeBalance {
        EnvelopeBalance {
            stored: self.pending.values().map(|(_, l)| l).sum(),
            ..self.balance.clone()
        }
    }
}

pub type SharedLedger = Arc<Mutex<CostLedger>>;

/// A party's view of the in-process server that charges each call.
#[derive(Clone)]
pub struct CountingServer {
    inner: Arc<Store>,
    ledger: SharedLedger,
    party: usize,
}

impl CountingServer {
    pub fn new(inner: Arc<Store>, ledger: SharedLedger, party: usize) -> Self {
        CountingServer { inner, ledger, party }
    }

    pub fn party(&self) -> usize {
        self.party
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.inner
    }

    /// Charges the receipt of `k` notification prefixes as one feed frame.
    pub fn charge_notifications(&self, k: usize) {
        if k == 0 {
            return;
        }
        let mut l = self.ledger.lock();
        let p = l.party(self.party);
        p.notifications += k as u64;
        p.wire_received += feed_frame_len(k);
        p.raw_received += (k * PREFIX_SIZE) as u64;
    }
}

impl CommServer for CountingServer {
    fn broadcast(&self, payload: &[u8]) -> Result<u64, CommError> {
        let r = self.inner.broadcast(payload);
        let mut l = self.ledger.lock();
        let p = l.party(self.party);
        p.broadcasts += 1;
        let wire = broadcast_request_len(payload.len()) + broadcast_response_len();
        p.wire_sent += broadcast_request_len(payload.len());
        p.raw_sent += payload.len() as u64;
        p.wire_received += broadcast_response_len();
        p.bulletin_wire += wire;
        if is_cover_key(payload) {
            p.cover_key_wire += wire;
        }
        if r.is_ok() {
            p.storage_bytes += payload.len() as u64;
        }
        r
    }

    fn read(&self, after_seq: u64) -> Result<Vec<BulletinEntry>, CommError> {
        let r = self.inner.read(after_seq)?;
        let mut l = self.ledger.lock();
        let p = l.party(self.party);
        p.reads += 1;
        p.wire_sent += read_request_len();
        p.wire_received += read_response_len(&r);
        p.raw_received += r.iter().map(|e| e.payload.len() as u64).sum::<u64>();
        p.bulletin_wire += read_request_len() + read_response_len(&r);
        p.cover_key_wire += r
            .iter()
            .filter(|e| is_cover_key(&e.payload))
            .map(|e| entry_len(e.payload.len()))
            .sum::<u64>();
        Ok(r)
    }

    fn put(&self, addr: &Address, ciphertext: &[u8]) -> Result<(), CommError> {
        let r = self.inner.put(addr, ciphertext);
        let now = self.inner.now();
        let mut l = self.ledger.lock();
        let p = l.party(self.party);
        p.puts += 1;
        p.wire_sent += put_request_len(ciphertext.len());
        p.raw_sent += ciphertext.len() as u64;
        p.wire_received += put_response_len();
        if r.is_ok() {
            p.storage_bytes += ciphertext.len() as u64;
            l.uploaded(*addr, now, ciphertext.len() as u64);
            let party = self.party;
            if let Some(t) = l.transcript.as_mut() {
                t.push(PutRecord {
                    at: now,
                    party,
                    addr: *addr,
                    len: ciphertext.len(),
                });
            }
        }
        r
    }

    fn get(&self, addr: &Address) -> Result<Option<Vec<u8>>, CommError> {
        let r = self.inner.get(addr)?;
        let mut l = self.ledger.lock();
        let first = match &r {
            Some(ct) => l.fetched(addr, ct.len() as u64),
            None => false,
        };
        let p = l.party(self.party);
        p.gets += 1;
        p.wire_sent += get_request_len();
        p.wire_received += get_response_len(r.as_ref().map(Vec::len));
        if let Some(ct) = &r {
            p.raw_received += ct.len() as u64;
            if first {
                p.hits += 1;
            }
        }
        Ok(r)
    }

    fn monitor(&self, since: Millis) -> Result<Monitor, CommError> {
        let m = self.inner.monitor(since)?;
        let mut l = self.ledger.lock();
        let p = l.party(self.party);
        p.wire_sent += frame_len(&[8]);
        p.wire_received += frame_len(&[1, m.bulk.to_bytes().len(), 8]);
        Ok(m)
    }
}
