//! A node's messaging endpoint: pairwise channels, receive watches, cover
//! keys and the cover schedule, driven by explicit time.
//!
//! Nothing here reads a clock or spawns a thread. The owner calls
//! [`Messenger::tick`] at or after [`Messenger::next_deadline`] and feeds in
//! notifications from the server's monitor stream.

use std::collections::{BTreeMap, BTreeSet};

use datashare_core::crypto::{GroupElement, KeyPair, ELEMENT_SIZE};
use datashare_core::cuckoo::CuckooFilter;
use datashare_pigeonhole::clock::{Millis, DAY};
use datashare_pigeonhole::store::prefix_of;
use datashare_pigeonhole::{Address, CommError, CommServer, Prefix};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelState;
use crate::cover::{CoverAction, CoverRates, CoverScheduler, QueuedMessage, SendQueues};
use crate::envelope::{open, Kind, MAX_PAYLOAD};
use crate::MessagingError;

type KeyBytes = [u8; ELEMENT_SIZE];
/// `(my public key, peer public key)`.
type ChannelId = (KeyBytes, KeyBytes);

pub const NYM_SIZE: usize = 16;
pub type Nym = [u8; NYM_SIZE];

/// Bulletin payload announcing a cover key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CoverAnnouncement {
    pub nym: Nym,
    pub key: GroupElement,
}

impl CoverAnnouncement {
    pub const MAGIC: &'static [u8; 4] = b"DSCK";
    pub const LEN: usize = 4 + NYM_SIZE + ELEMENT_SIZE;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::LEN);
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&self.nym);
        out.extend_from_slice(&self.key.to_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        if b.len() != Self::LEN || &b[..4] != Self::MAGIC {
            return None;
        }
        Some(CoverAnnouncement {
            nym: b[4..4 + NYM_SIZE].try_into().unwrap(),
            key: GroupElement::from_bytes(&b[4 + NYM_SIZE..]).ok()?,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MessengerConfig {
    #[serde(with = "hex::serde")]
    pub nym: Nym,
    pub rates: CoverRates,
    /// How long a receive watch waits without a message.
    pub receive_timeout: Millis,
    /// Lifetime of a cover key after a newer one from the same nym appears.
    pub cover_key_grace: Millis,
    /// Hard cap on how long any cover key is watched.
    pub cover_key_max_age: Millis,
}

impl MessengerConfig {
    pub fn new(nym: Nym, rates: CoverRates) -> Self {
        MessengerConfig {
            nym,
            rates,
            receive_timeout: 7 * DAY,
            cover_key_grace: (DAY as f64 / rates.key_per_day) as Millis,
            cover_key_max_age: 30 * DAY,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Delivery<T> {
    /// `None` for real messages that arrive on a cover channel.
    pub tag: Option<T>,
    pub me: GroupElement,
    pub peer: GroupElement,
    pub payload: Vec<u8>,
    pub at: Millis,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event<T> {
    Delivered(Delivery<T>),
    TimedOut { tag: T, me: GroupElement, peer: GroupElement },
}

/// One upload made by the cover process.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SentRecord {
    pub at: Millis,
    pub recipient: GroupElement,
    pub addr: Address,
    /// Set for conversation messages: how long it waited in the queue.
    pub latency: Option<Millis>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MessengerStats {
    pub real_sent: u64,
    pub dummy_sent: u64,
    pub direct_sent: u64,
    pub send_failures: u64,
    pub cover_keys_published: u64,
    pub probes: u64,
    pub empty_probes: u64,
    pub real_received: u64,
    pub dummies_received: u64,
    pub garbage_received: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Watch<T> {
    tag: Option<T>,
    deadline: Option<Millis>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PeerCoverKey {
    #[serde(with = "hex::serde")]
    nym: Nym,
    key: GroupElement,
    posted_at: Millis,
    superseded_at: Option<Millis>,
}

/// Persistent parts of a [`Messenger`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MessengerSnapshot<T> {
    channels: Vec<ChannelState>,
    tagged_watches: Vec<(GroupElement, GroupElement, T, Option<Millis>)>,
    listening: Vec<KeyPair>,
    peer_cover: Vec<PeerCoverKey>,
    queues: SendQueues,
}

pub struct Messenger<T> {
    config: MessengerConfig,
    scheduler: CoverScheduler,
    rng: ChaCha20Rng,
    channels: BTreeMap<ChannelId, ChannelState>,
    watches: BTreeMap<ChannelId, Watch<T>>,
    by_prefix: BTreeMap<Prefix, BTreeSet<ChannelId>>,
    listening: BTreeMap<KeyBytes, KeyPair>,
    cover_key: Option<KeyPair>,
    peer_cover: BTreeMap<KeyBytes, PeerCoverKey>,
    stats: MessengerStats,
}

impl<T: Clone> Messenger<T> {
    pub fn new(config: MessengerConfig, seed: u64) -> Self {
        Messenger {
            scheduler: CoverScheduler::new(config.rates, seed),
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6d65_7373_656e_6765),
            config,
            channels: BTreeMap::new(),
            watches: BTreeMap::new(),
            by_prefix: BTreeMap::new(),
            listening: BTreeMap::new(),
            cover_key: None,
            peer_cover: BTreeMap::new(),
            stats: MessengerStats::default(),
        }
    }

    pub fn config(&self) -> &MessengerConfig {
        &self.config
    }

    pub fn stats(&self) -> MessengerStats {
        self.stats
    }

    pub fn scheduler(&self) -> &CoverScheduler {
        &self.scheduler
    }

    pub fn cover_key(&self) -> Option<&GroupElement> {
        self.cover_key.as_ref().map(KeyPair::public)
    }

    pub fn channel(&self, me: &GroupElement, peer: &GroupElement) -> Option<&ChannelState> {
        self.channels.get(&(me.to_bytes(), peer.to_bytes()))
    }

    pub fn watch_count(&self) -> usize {
        self.watches.len()
    }

    fn channel_entry(&mut self, me: &KeyPair, peer: &GroupElement) -> Result<&mut ChannelState, MessagingError> {
        let id = (me.public().to_bytes(), peer.to_bytes());
        if !self.channels.contains_key(&id) {
            self.channels.insert(id, ChannelState::new(me.clone(), *peer)?);
        }
        Ok(self.channels.get_mut(&id).unwrap())
    }

    fn index(&mut self, id: ChannelId) {
        let prefix = prefix_of(&self.channels[&id].receive_slot().addr);
        self.by_prefix.entry(prefix).or_default().insert(id);
    }

    fn unindex(&mut self, id: &ChannelId) {
        let prefix = prefix_of(&self.channels[id].receive_slot().addr);
        if let Some(set) = self.by_prefix.get_mut(&prefix) {
            set.remove(id);
            if set.is_empty() {
                self.by_prefix.remove(&prefix);
            }
        }
    }

    fn arm(&mut self, me: &KeyPair, peer: &GroupElement, tag: Option<T>, deadline: Option<Millis>) -> Result<ChannelId, MessagingError> {
        self.channel_entry(me, peer)?;
        let id = (me.public().to_bytes(), peer.to_bytes());
        if self.watches.insert(id, Watch { tag, deadline }).is_none() {
            self.index(id);
        }
        Ok(id)
    }

    fn disarm(&mut self, id: &ChannelId) -> Option<Watch<T>> {
        let w = self.watches.remove(id)?;
        self.unindex(id);
        Some(w)
    }

    /// Starts (or restarts) a receive process for messages from `peer` to
    /// `me`, probing once for anything already waiting.
    pub fn watch(
        &mut self,
        me: &KeyPair,
        peer: &GroupElement,
        tag: T,
        server: &dyn CommServer,
        now: Millis,
    ) -> Result<Vec<Event<T>>, MessagingError> {
        let id = self.arm(me, peer, Some(tag), Some(now + self.config.receive_timeout))?;
        let mut events = Vec::new();
        self.probe(id, server, now, &mut events)?;
        Ok(events)
    }

    pub fn unwatch(&mut self, me: &GroupElement, peer: &GroupElement) {
        self.disarm(&(me.to_bytes(), peer.to_bytes()));
    }

    /// Drops a channel and any watch on it.
    pub fn forget(&mut self, me: &GroupElement, peer: &GroupElement) {
        let id = (me.to_bytes(), peer.to_bytes());
        self.disarm(&id);
        self.channels.remove(&id);
    }

    fn cover_key_live(&self, k: &PeerCoverKey, now: Millis) -> bool {
        now.saturating_sub(k.posted_at) < self.config.cover_key_max_age
            && k.superseded_at.map_or(true, |s| now < s + self.config.cover_key_grace)
    }

    /// Adds a key whose owner should receive cover messages.
    pub fn add_listening_key(&mut self, key: KeyPair, server: &dyn CommServer, now: Millis) -> Result<Vec<Event<T>>, MessagingError> {
        let peers: Vec<GroupElement> = self.peer_cover.values().map(|k| k.key).collect();
        self.listening.insert(key.public().to_bytes(), key.clone());
        let mut events = Vec::new();
        for peer in peers {
            let id = self.arm(&key, &peer, None, None)?;
            self.probe(id, server, now, &mut events)?;
        }
        Ok(events)
    }

    pub fn remove_listening_key(&mut self, pk: &GroupElement) {
        let mine = pk.to_bytes();
        self.listening.remove(&mine);
        let ids: Vec<ChannelId> = self
            .peer_cover
            .keys()
            .map(|peer| (mine, *peer))
            .collect();
        for id in ids {
            if self.watches.get(&id).is_some_and(|w| w.tag.is_none()) {
                self.disarm(&id);
                self.channels.remove(&id);
            }
        }
    }

    pub fn listening_keys(&self) -> impl Iterator<Item = &KeyPair> {
        self.listening.values()
    }

    /// Handles a cover-key announcement read from the bulletin board.
    pub fn observe_cover_key(
        &mut self,
        ann: &CoverAnnouncement,
        posted_at: Millis,
        server: &dyn CommServer,
        now: Millis,
    ) -> Result<Vec<Event<T>>, MessagingError> {
        let kb = ann.key.to_bytes();
        if ann.nym == self.config.nym || self.peer_cover.contains_key(&kb) {
            return Ok(Vec::new());
        }
        for k in self.peer_cover.values_mut() {
            if k.nym == ann.nym && k.posted_at <= posted_at && k.superseded_at.is_none() {
                k.superseded_at = Some(posted_at);
            }
        }
        let entry = PeerCoverKey {
            nym: ann.nym,
            key: ann.key,
            posted_at,
            superseded_at: None,
        };
        if !self.cover_key_live(&entry, now) {
            return Ok(Vec::new());
        }
        self.peer_cover.insert(kb, entry);
        let mine: Vec<KeyPair> = self.listening.values().cloned().collect();
        let mut events = Vec::new();
        for me in mine {
            let id = self.arm(&me, &ann.key, None, None)?;
            self.probe(id, server, now, &mut events)?;
        }
        Ok(events)
    }

    pub fn live_cover_keys(&self) -> usize {
        self.peer_cover.len()
    }

    /// Sets who receives cover traffic. Our own listening keys are skipped.
    pub fn set_directory<'a>(&mut self, recipients: impl IntoIterator<Item = &'a GroupElement>, now: Millis) {
        let own = &self.listening;
        let filtered: Vec<&GroupElement> = recipients
            .into_iter()
            .filter(|pk| !own.contains_key(&pk.to_bytes()))
            .collect();
        self.scheduler.set_recipients(filtered, now);
    }

    pub fn go_online(&mut self, now: Millis) -> Result<(), MessagingError> {
        let mine: Vec<KeyPair> = self.listening.values().cloned().collect();
        let peers: Vec<GroupElement> = self
            .peer_cover
            .values()
            .filter(|k| self.cover_key_live(k, now))
            .map(|k| k.key)
            .collect();
        for me in &mine {
            for peer in &peers {
                self.arm(me, peer, None, None)?;
            }
        }
        self.scheduler.go_online(now);
        Ok(())
    }

    /// Stops the cover process and cancels its receive processes.
    pub fn go_offline(&mut self) {
        self.scheduler.go_offline();
        let cover: Vec<ChannelId> = self
            .watches
            .iter()
            .filter(|(_, w)| w.tag.is_none())
            .map(|(id, _)| *id)
            .collect();
        for id in cover {
            self.disarm(&id);
        }
        self.cover_key = None;
    }

    /// Queues `payload` for the next cover firing towards `recipient`.
    pub fn hidden_send(&mut self, sender: &KeyPair, recipient: &GroupElement, payload: &[u8], now: Millis) -> Result<(), MessagingError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(MessagingError::Oversize(payload.len()));
        }
        self.scheduler.enqueue(
            recipient,
            QueuedMessage {
                sender: sender.clone(),
                payload: payload.to_vec(),
                enqueued_at: now,
            },
        );
        Ok(())
    }

    /// Uploads a real message immediately, outside the cover schedule.
    pub fn send_now(
        &mut self,
        sender: &KeyPair,
        recipient: &GroupElement,
        payload: &[u8],
        server: &dyn CommServer,
    ) -> Result<Address, MessagingError> {
        let mut rng = ChaCha20Rng::from_rng(&mut self.rng).expect("seeded");
        let addr = self.channel_entry(sender, recipient)?.send_raw(server, Kind::Real, payload, &mut rng)?;
        self.stats.direct_sent += 1;
        Ok(addr)
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        let watch = self.watches.values().filter_map(|w| w.deadline).min();
        match (self.scheduler.next_deadline(), watch) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs every cover action due by `now`, then expires watches and
    /// cover keys.
    pub fn tick(&mut self, server: &dyn CommServer, now: Millis) -> Result<(Vec<Event<T>>, Vec<SentRecord>), MessagingError> {
        let mut sent = Vec::new();
        let mut first_error = None;
        for action in self.scheduler.poll(now) {
            match action {
                CoverAction::RefreshKey { .. } => {
                    let key = KeyPair::generate(&mut self.rng);
                    let ann = CoverAnnouncement {
                        nym: self.config.nym,
                        key: *key.public(),
                    };
                    match server.broadcast(&ann.to_bytes()) {
                        Ok(_) => {
                            if let Some(old) = self.cover_key.replace(key) {
                                let mine = old.public().to_bytes();
                                self.channels.retain(|(me, _), _| *me != mine);
                            }
                            self.stats.cover_keys_published += 1;
                        }
                        Err(e) => {
                            first_error.get_or_insert(MessagingError::from(e));
                        }
                    }
                }
                CoverAction::Send { at, recipient, message } => {
                    let (sender, payload, kind) = match &message {
                        Some(m) => (m.sender.clone(), m.payload.clone(), Kind::Real),
                        None => match &self.cover_key {
                            Some(k) => (k.clone(), Vec::new(), Kind::Dummy),
                            None => continue,
                        },
                    };
                    let mut rng = ChaCha20Rng::from_rng(&mut self.rng).expect("seeded");
                    let result = self
                        .channel_entry(&sender, &recipient)
                        .and_then(|ch| ch.send_raw(server, kind, &payload, &mut rng));
                    match result {
                        Ok(addr) => {
                            match kind {
                                Kind::Real => self.stats.real_sent += 1,
                                Kind::Dummy => self.stats.dummy_sent += 1,
                            }
                            sent.push(SentRecord {
                                at,
                                recipient,
                                addr,
                                latency: message.map(|m| at.saturating_sub(m.enqueued_at)),
                            });
                        }
                        Err(e) => {
                            self.stats.send_failures += 1;
                            if let Some(m) = message {
                                self.scheduler.requeue(&recipient, m);
                            }
                            first_error.get_or_insert(e);
                        }
                    }
                }
            }
        }
        let events = self.expire(now);
        match first_error {
            Some(e) if sent.is_empty() && events.is_empty() => Err(e),
            _ => Ok((events, sent)),
        }
    }

    fn expire(&mut self, now: Millis) -> Vec<Event<T>> {
        let mut events = Vec::new();
        let due: Vec<ChannelId> = self
            .watches
            .iter()
            .filter(|(_, w)| w.deadline.is_some_and(|d| d <= now))
            .map(|(id, _)| *id)
            .collect();
        for id in due {
            if let Some(Watch { tag: Some(tag), .. }) = self.disarm(&id) {
                let ch = &self.channels[&id];
                events.push(Event::TimedOut {
                    tag,
                    me: *ch.me().public(),
                    peer: *ch.peer(),
                });
            }
        }
        let stale: Vec<KeyBytes> = self
            .peer_cover
            .iter()
            .filter(|(_, k)| !self.cover_key_live(k, now))
            .map(|(kb, _)| *kb)
            .collect();
        for kb in stale {
            self.peer_cover.remove(&kb);
            let ids: Vec<ChannelId> = self.listening.keys().map(|me| (*me, kb)).collect();
            for id in ids {
                self.disarm(&id);
                self.channels.remove(&id);
            }
        }
        events
    }

    /// Handles one live notification prefix.
    pub fn on_prefix(&mut self, prefix: Prefix, server: &dyn CommServer, now: Millis) -> Result<Vec<Event<T>>, MessagingError> {
        let ids: Vec<ChannelId> = self
            .by_prefix
            .get(&prefix)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        let mut events = Vec::new();
        for id in ids {
            self.probe(id, server, now, &mut events)?;
        }
        Ok(events)
    }

    /// Handles the bulk filter sent when monitoring starts.
    pub fn on_bulk(&mut self, filter: &CuckooFilter, server: &dyn CommServer, now: Millis) -> Result<Vec<Event<T>>, MessagingError> {
        let ids: Vec<ChannelId> = self
            .watches
            .keys()
            .filter(|id| filter.membership(&self.channels[*id].receive_slot().addr))
            .copied()
            .collect();
        let mut events = Vec::new();
        for id in ids {
            self.probe(id, server, now, &mut events)?;
        }
        Ok(events)
    }

    /// Fetches the watched slot and every consecutive one that is filled.
    fn probe(&mut self, id: ChannelId, server: &dyn CommServer, now: Millis, events: &mut Vec<Event<T>>) -> Result<(), MessagingError> {
        let mut first = true;
        while self.watches.contains_key(&id) {
            let slot = self.channels[&id].receive_slot();
            self.stats.probes += 1;
            let Some(ct) = server.get(&slot.addr).map_err(MessagingError::from)? else {
                if first {
                    self.stats.empty_probes += 1;
                }
                return Ok(());
            };
            first = false;
            self.unindex(&id);
            let ch = self.channels.get_mut(&id).unwrap();
            ch.advance_received();
            let (me, peer) = (*ch.me().public(), *ch.peer());
            self.index(id);
            let watch = self.watches.get_mut(&id).unwrap();
            match open(&slot.key, &ct) {
                Ok((Kind::Real, payload)) => {
                    self.stats.real_received += 1;
                    if watch.deadline.is_some() {
                        watch.deadline = Some(now + self.config.receive_timeout);
                    }
                    events.push(Event::Delivered(Delivery {
                        tag: watch.tag.clone(),
                        me,
                        peer,
                        payload,
                        at: now,
                    }));
                }
                Ok((Kind::Dummy, _)) => self.stats.dummies_received += 1,
                Err(_) => self.stats.garbage_received += 1,
            }
        }
        Ok(())
    }
}

impl<T: Clone + Serialize + for<'de> Deserialize<'de>> Messenger<T> {
    pub fn snapshot(&self) -> MessengerSnapshot<T> {
        MessengerSnapshot {
            channels: self.channels.values().cloned().collect(),
            tagged_watches: self
                .watches
                .iter()
                .filter_map(|(id, w)| {
                    let ch = &self.channels[id];
                    w.tag.clone().map(|t| (*ch.me().public(), *ch.peer(), t, w.deadline))
                })
                .collect(),
            listening: self.listening.values().cloned().collect(),
            peer_cover: self.peer_cover.values().cloned().collect(),
            queues: self.scheduler.queues().clone(),
        }
    }

    /// Rebuilds a messenger from a snapshot. It starts offline.
    pub fn restore(config: MessengerConfig, snapshot: MessengerSnapshot<T>, seed: u64) -> Self {
        let mut m = Messenger::new(config, seed);
        for ch in snapshot.channels {
            m.channels.insert((ch.me().public().to_bytes(), ch.peer().to_bytes()), ch);
        }
        for (me, peer, tag, deadline) in snapshot.tagged_watches {
            let id = (me.to_bytes(), peer.to_bytes());
            if m.channels.contains_key(&id) {
                m.watches.insert(id, Watch { tag: Some(tag), deadline });
                m.index(id);
            }
        }
        for k in snapshot.listening {
            m.listening.insert(k.public().to_bytes(), k);
        }
        for k in snapshot.peer_cover {
            m.peer_cover.insert(k.key.to_bytes(), k);
        }
        m.scheduler.restore_queues(snapshot.queues);
        m
    }
}

impl From<CommError> for MessagingError {
    fn from(e: CommError) -> Self {
        MessagingError::Comm(e)
    }
}
