//! Per key-pair message counters and the raw send operation.

use datashare_core::crypto::{GroupElement, KeyPair};
use datashare_pigeonhole::{Address, CommError, CommServer, StoreError};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::envelope::{derive, seal, shared_secret, Kind, Slot, MAX_PAYLOAD};
use crate::MessagingError;

/// A sealed envelope whose upload was not acknowledged.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct Pending {
    counter: u64,
    #[serde(with = "hex::serde")]
    addr: Address,
    #[serde(with = "hex::serde")]
    ciphertext: Vec<u8>,
}

/// One end of a pairwise channel: my keypair, the peer's public key, and
/// how many slots each direction has consumed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelState {
    me: KeyPair,
    peer: GroupElement,
    #[serde(with = "hex::serde")]
    shared: [u8; 32],
    sent: u64,
    received: u64,
    pending: Option<Pending>,
}

impl ChannelState {
    pub fn new(me: KeyPair, peer: GroupElement) -> Result<Self, MessagingError> {
        let shared = shared_secret(me.secret(), &peer)?;
        Ok(ChannelState {
            me,
            peer,
            shared,
            sent: 0,
            received: 0,
            pending: None,
        })
    }

    pub fn me(&self) -> &KeyPair {
        &self.me
    }

    pub fn peer(&self) -> &GroupElement {
        &self.peer
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    pub fn received(&self) -> u64 {
        self.received
    }

    pub fn send_slot(&self, counter: u64) -> Slot {
        derive(&self.shared, self.me.public(), counter)
    }

    /// The slot the peer's next message will use.
    pub fn receive_slot(&self) -> Slot {
        derive(&self.shared, &self.peer, self.received)
    }

    pub(crate) fn advance_received(&mut self) {
        self.received += 1;
    }

    fn seal_next<R: RngCore + CryptoRng>(&self, kind: Kind, payload: &[u8], rng: &mut R) -> Result<Pending, MessagingError> {
        let slot = self.send_slot(self.sent);
        Ok(Pending {
            counter: self.sent,
            addr: slot.addr,
            ciphertext: seal(&slot.key, kind, payload, rng)?,
        })
    }

    /// Uploads one envelope, first finishing any upload left unacknowledged
    /// by an earlier transport failure.
    ///
    /// If the server reports the slot as taken and it does not hold our own
    /// earlier upload, the slot is skipped and the next one tried once.
    pub fn send_raw<R: RngCore + CryptoRng>(
        &mut self,
        server: &dyn CommServer,
        kind: Kind,
        payload: &[u8],
        rng: &mut R,
    ) -> Result<Address, MessagingError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(MessagingError::Oversize(payload.len()));
        }
        if let Some(p) = self.pending.take() {
            self.upload(server, p, false)?;
        }
        let next = self.seal_next(kind, payload, rng)?;
        match self.upload(server, next, true) {
            Err(MessagingError::SlotTaken) => {
                let retry = self.seal_next(kind, payload, rng)?;
                self.upload(server, retry, false)
            }
            other => other,
        }
    }

    fn upload(&mut self, server: &dyn CommServer, p: Pending, allow_retry: bool) -> Result<Address, MessagingError> {
        match server.put(&p.addr, &p.ciphertext) {
            Ok(()) => {
                self.sent = p.counter + 1;
                Ok(p.addr)
            }
            Err(CommError::Rejected(StoreError::AddressInUse)) => {
                self.sent = p.counter + 1;
                match server.get(&p.addr) {
                    Ok(Some(stored)) if stored == p.ciphertext => Ok(p.addr),
                    Ok(_) if allow_retry => Err(MessagingError::SlotTaken),
                    Ok(_) => Err(MessagingError::Collision),
                    Err(e) => Err(e.into()),
                }
            }
            Err(e @ CommError::Transport(_)) => {
                self.pending = Some(p);
                Err(e.into())
            }
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envelope::{open, ENVELOPE_LEN};
    use datashare_pigeonhole::{BulletinEntry, ManualClock, Monitor, Store, StoreConfig};
    use flaky::FlakyServer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;
    use std::sync::Arc;

    fn store() -> Arc<Store> {
        Arc::new(Store::new(StoreConfig::default(), Arc::new(ManualClock::new(0))))
    }

    fn pair(seed: u64) -> (ChannelState, ChannelState) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let a = KeyPair::generate(&mut rng);
        let b = KeyPair::generate(&mut rng);
        (
            ChannelState::new(a.clone(), *b.public()).unwrap(),
            ChannelState::new(b, *a.public()).unwrap(),
        )
    }

    #[test]
    fn round_trip_and_counters() {
        let server = store();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let (mut alice, mut bob) = pair(1);
        let a1 = alice.send_raw(&server, Kind::Real, b"first", &mut rng).unwrap();
        let a2 = alice.send_raw(&server, Kind::Real, b"second", &mut rng).unwrap();
        assert_ne!(a1, a2);
        for expected in [&b"first"[..], b"second"] {
            let slot = bob.receive_slot();
            let ct = server.get(&slot.addr).unwrap().unwrap();
            assert_eq!(ct.len(), ENVELOPE_LEN);
            assert_eq!(open(&slot.key, &ct).unwrap(), (Kind::Real, expected.to_vec()));
            bob.advance_received();
        }
        assert_eq!(alice.sent(), bob.received());
    }

    #[test]
    fn oversize_rejected_before_network() {
        let server = FlakyServer::new(store(), 0);
        let (mut alice, _) = pair(2);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let r = alice.send_raw(&server, Kind::Real, &vec![0; MAX_PAYLOAD + 1], &mut rng);
        assert!(matches!(r, Err(MessagingError::Oversize(_))));
        assert_eq!(server.calls(), 0);
        assert_eq!(alice.sent(), 0);
    }

    #[test]
    fn squatted_slot_is_skipped_once() {
        let server = store();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let (mut alice, _) = pair(3);
        let squat = alice.send_slot(0).addr;
        server.put(&squat, &vec![0u8; ENVELOPE_LEN]).unwrap();
        let addr = alice.send_raw(&server, Kind::Real, b"x", &mut rng).unwrap();
        assert_eq!(addr, alice.send_slot(1).addr);
        assert_eq!(alice.sent(), 2);
    }

    #[test]
    fn lost_ack_does_not_duplicate() {
        let inner = store();
        let server = FlakyServer::new(inner.clone(), 1);
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let (mut alice, mut bob) = pair(4);
        assert!(alice.send_raw(&server, Kind::Real, b"one", &mut rng).is_err());
        assert_eq!(alice.sent(), 0);
        alice.send_raw(&server, Kind::Real, b"two", &mut rng).unwrap();
        assert_eq!(alice.sent(), 2);
        let mut got = Vec::new();
        while let Some(ct) = inner.get(&bob.receive_slot().addr).unwrap() {
            got.push(open(&bob.receive_slot().key, &ct).unwrap().1);
            bob.advance_received();
        }
        assert_eq!(got, vec![b"one".to_vec(), b"two".to_vec()]);
    }

    #[test]
    fn state_survives_serialization() {
        let (alice, _) = pair(5);
        let json = serde_json::to_string(&alice).unwrap();
        let back: ChannelState = serde_json::from_str(&json).unwrap();
        assert_eq!(back.send_slot(3), alice.send_slot(3));
    }

    mod flaky {
        use super::*;
        use std::sync::atomic::{AtomicUsize, Ordering};

        /// Stores every put but reports the first `drop_acks` as transport
        /// failures.
        pub struct FlakyServer {
            inner: Arc<Store>,
            drop_acks: AtomicUsize,
            calls: AtomicUsize,
        }

        impl FlakyServer {
            pub fn new(inner: Arc<Store>, drop_acks: usize) -> Self {
                FlakyServer {
                    inner,
                    drop_acks: AtomicUsize::new(drop_acks),
                    calls: AtomicUsize::new(0),
                }
            }

            pub fn calls(&self) -> usize {
                self.calls.load(Ordering::SeqCst)
            }
        }

        impl CommServer for FlakyServer {
            fn broadcast(&self, payload: &[u8]) -> Result<u64, CommError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.inner.broadcast(payload)
            }
            fn read(&self, after_seq: u64) -> Result<Vec<BulletinEntry>, CommError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.inner.read(after_seq)
            }
            fn put(&self, addr: &Address, ciphertext: &[u8]) -> Result<(), CommError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.inner.put(addr, ciphertext)?;
                if self
                    .drop_acks
                    .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                    .is_ok()
                {
                    return Err(CommError::Transport("ack lost".into()));
                }
                Ok(())
            }
            fn get(&self, addr: &Address) -> Result<Option<Vec<u8>>, CommError> {
                self.calls.fetch_add(1, Ordering::SeqCst);
                self.inner.get(addr)
            }
            fn monitor(&self, since: u64) -> Result<Monitor, CommError> {
                self.inner.monitor(since)
            }
        }
    }
}
