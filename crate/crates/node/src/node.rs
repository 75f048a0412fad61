//! The node state machine.
//!
//! A [`Node`] owns every piece of mutable journalist state and is driven
//! from outside: [`Node::tick`] at [`Node::next_deadline`], and
//! [`Node::on_prefix`] / [`Node::on_bulk`] with monitor notifications. It
//! never reads a clock, so the same code runs under simulation and in the
//! daemon.

use std::collections::{BTreeMap, BTreeSet};

use datashare_core::crypto::{GroupElement, KeyPair, Scalar};
use datashare_core::cuckoo::{CuckooFilter, CuckooParams};
use datashare_core::mspsi::{self, Corpus, Keyword, OpCounts, QuerySecret, TagCollection};
use datashare_core::tokens::{prune_registry, verify_authorized, AuthorizedMessage, Rejection, SpendRegistry};
use datashare_core::CuckooError;
use datashare_messaging::{CoverRates, Event, Messenger, MessengerConfig, MessengerSnapshot, Nym};
use datashare_pigeonhole::clock::Millis;
use datashare_pigeonhole::{CommServer, Prefix};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::identity::{JournalistIdentity, SavedIdentity};
use crate::wire::{bundle_to_bulletin, chat_payloads, parse_bulletin, Announcement, BulletinItem, Payload, PublishedQuery, Record};
use crate::NodeError;

/// What a receive watch is waiting for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WatchTag {
    /// The reply of `owner` to our query `query`, then conversation.
    Reply {
        query: u64,
        #[serde(with = "hex::serde")]
        owner: Nym,
    },
    /// Messages from a querier we answered.
    Conversation,
}

/// One owner's answer to a query.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchReport {
    #[serde(with = "hex::serde")]
    pub owner: Nym,
    /// Intersection size per document, in document order.
    pub sizes: Vec<usize>,
    /// Documents containing every real keyword.
    pub matches: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OutstandingQuery {
    pub id: u64,
    /// Real keywords as typed.
    pub keywords: Vec<String>,
    blinding: Scalar,
    /// Real then padding keywords, hex-encoded.
    padded: Vec<String>,
    real_count: usize,
    pub key: KeyPair,
    pub posted_at: Millis,
    pub reports: Vec<MatchReport>,
    /// Owners whose reply failed validation.
    #[serde(with = "nym_list")]
    pub flagged: Vec<Nym>,
    /// Owner contact keys whose reply channel is being watched.
    watching: Vec<GroupElement>,
}

impl OutstandingQuery {
    fn secret(&self) -> Result<QuerySecret, NodeError> {
        let keywords = self
            .padded
            .iter()
            .map(|k| hex::decode(k).map_err(|_| NodeError::Malformed("keyword hex")))
            .collect::<Result<Vec<Keyword>, _>>()?;
        Ok(QuerySecret::from_parts(self.blinding, keywords, self.real_count)?)
    }

    pub fn report_from(&self, owner: &Nym) -> Option<&MatchReport> {
        self.reports.iter().find(|r| &r.owner == owner)
    }
}

mod nym_list {
    use datashare_messaging::Nym;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Nym], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(hex::encode).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Nym>, D::Error> {
        Vec::<String>::deserialize(d)?
            .into_iter()
            .map(|h| {
                let mut nym = [0u8; 16];
                hex::decode_to_slice(&h, &mut nym).map_err(serde::de::Error::custom)?;
                Ok(nym)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatLine {
    pub at: Millis,
    pub outgoing: bool,
    pub text: String,
}

/// A pairwise conversation between one of our keys and a peer key.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conversation {
    pub me: KeyPair,
    pub peer: GroupElement,
    /// Set on the querier side.
    pub query: Option<u64>,
    #[serde(with = "hex::serde")]
    pub peer_nym: Vec<u8>,
    pub lines: Vec<ChatLine>,
    pub last_activity: Millis,
    #[serde(with = "hex::serde")]
    partial: Vec<u8>,
}

/// Counters for everything the node did or refused.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub records_seen: u64,
    pub queries_seen: u64,
    pub queries_answered: u64,
    pub stale_queries: u64,
    pub invalid_bundles: u64,
    pub replays: u64,
    pub reports: u64,
    pub bad_replies: u64,
    pub bad_payloads: u64,
    pub chat_received: u64,
    pub chat_sent: u64,
    pub reply_failures: u64,
    pub rotations: u64,
    pub publications: u64,
    pub publish_ops: OpCounts,
    pub reply_ops: OpCounts,
    pub process_ops: OpCounts,
}

/// Something the user may want to see.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Notice {
    Report { query: u64, report: MatchReport },
    BadReply { query: u64, owner: Nym },
    Answered { pk_q: GroupElement },
    Message { me: GroupElement, peer: GroupElement, text: String },
    ReplyTimedOut { query: u64, owner: Nym },
}

#[derive(Clone, Debug)]
struct Listed {
    seq: u64,
    posted_at: Millis,
    record: Record,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PendingReply {
    pk_q: GroupElement,
    #[serde(with = "hex::serde")]
    payload: Vec<u8>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct NodeState {
    cursor: u64,
    published_at: Option<Millis>,
    queries: Vec<OutstandingQuery>,
    next_query: u64,
    conversations: Vec<Conversation>,
    /// Other nodes' query keys with their posting time.
    foreign_queries: Vec<(GroupElement, Millis)>,
    pending_replies: Vec<PendingReply>,
    metrics: NodeMetrics,
}

/// Everything needed to rebuild a node, apart from the spend registry.
pub struct NodeSnapshot {
    pub identity: SavedIdentity,
    pub state: serde_json::Value,
    pub messenger: MessengerSnapshot<WatchTag>,
    /// `(seq, posted_at, record bytes)` of every listed record.
    pub records: Vec<(u64, Millis, Vec<u8>)>,
    pub tags: Option<Vec<u8>>,
}

pub struct Node {
    config: SystemConfig,
    identity: JournalistIdentity,
    messenger: Messenger<WatchTag>,
    registry: SpendRegistry,
    tags: Option<TagCollection>,
    records: BTreeMap<Nym, Listed>,
    state: NodeState,
    rng: ChaCha20Rng,
}

fn messenger_config(config: &SystemConfig, nym: Nym) -> MessengerConfig {
    let mut m = MessengerConfig::new(nym, CoverRates::with_send_rate(config.cover_rate));
    m.receive_timeout = config.query_lifetime;
    m
}

impl Node {
    pub fn new(config: SystemConfig, identity: JournalistIdentity, registry: SpendRegistry, seed: u64) -> Self {
        let messenger = Messenger::new(messenger_config(&config, *identity.nym()), seed);
        Node {
            config,
            identity,
            messenger,
            registry,
            tags: None,
            records: BTreeMap::new(),
            state: NodeState::default(),
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6e6f_6465),
        }
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn identity(&self) -> &JournalistIdentity {
        &self.identity
    }

    pub fn identity_mut(&mut self) -> &mut JournalistIdentity {
        &mut self.identity
    }

    pub fn messenger(&self) -> &Messenger<WatchTag> {
        &self.messenger
    }

    pub fn metrics(&self) -> &NodeMetrics {
        &self.state.metrics
    }

    pub fn queries(&self) -> &[OutstandingQuery] {
        &self.state.queries
    }

    pub fn conversations(&self) -> &[Conversation] {
        &self.state.conversations
    }

    pub fn is_published(&self) -> bool {
        self.state.published_at.is_some()
    }

    /// Records currently listed on the bulletin, by nym.
    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.records.values().map(|l| &l.record)
    }

    pub fn record(&self, nym: &Nym) -> Option<&Record> {
        self.records.get(nym).map(|l| &l.record)
    }

    /// Starts listening and the cover process.
    pub fn start(&mut self, server: &dyn CommServer, now: Millis) -> Result<Vec<Notice>, NodeError> {
        let mut keys = vec![self.identity.medium().clone()];
        keys.extend(
            self.state
                .queries
                .iter()
                .filter(|q| now < q.posted_at + self.config.query_lifetime)
                .map(|q| q.key.clone()),
        );
        let listening: BTreeSet<_> = self.messenger.listening_keys().map(|k| k.public().to_bytes()).collect();
        let mut notices = Vec::new();
        for k in keys {
            if !listening.contains(&k.public().to_bytes()) {
                let events = self.messenger.add_listening_key(k, server, now)?;
                self.handle_events(events, now, &mut notices)?;
            }
        }
        self.refresh_directory(now);
        self.messenger.go_online(now)?;
        Ok(notices)
    }

    pub fn stop(&mut self) {
        self.messenger.go_offline();
    }

    fn spend(&mut self, message: &[u8], server: &dyn CommServer) -> Result<AuthorizedMessage, NodeError> {
        let bundle = self.identity.wallet_mut().authorize(message, &mut self.rng)?;
        server.broadcast(&bundle_to_bulletin(&bundle))?;
        Ok(bundle)
    }

    /// Precomputes tags for `corpus`, compresses them and broadcasts the
    /// record. Consumes one token.
    pub fn publish(&mut self, corpus: &Corpus, server: &dyn CommServer, now: Millis) -> Result<Record, NodeError> {
        if corpus.is_empty() || corpus.total_elements() == 0 {
            return Err(NodeError::EmptyCorpus);
        }
        if self.identity.wallet().is_empty() {
            return Err(datashare_core::TokenError::QuotaExhausted { remaining_secs: 0 }.into());
        }
        let tags = mspsi::precompute_counted(corpus, self.identity.server_key(), &mut self.state.metrics.publish_ops)?;
        self.tags = Some(tags);
        self.publish_record(server, now)
    }

    fn publish_record(&mut self, server: &dyn CommServer, now: Millis) -> Result<Record, NodeError> {
        let tags = self.tags.as_ref().ok_or(NodeError::NotPublished)?;
        let record = Record {
            nym: *self.identity.nym(),
            pk: *self.identity.medium().public(),
            filter: compress(tags, self.config.record_fpr)?,
            doc_count: tags.doc_count(),
        };
        self.spend(&Announcement::Record(record.clone()).to_bytes(), server)?;
        self.state.published_at = Some(now);
        self.state.metrics.publications += 1;
        Ok(record)
    }

    /// Pads `keywords` to `lim`, broadcasts the blinded query under a fresh
    /// key and starts waiting for replies. Consumes one token.
    pub fn query(&mut self, keywords: &[Keyword], server: &dyn CommServer, now: Millis) -> Result<u64, NodeError> {
        if keywords.is_empty() {
            return Err(NodeError::NoKeywords);
        }
        if keywords.len() > self.config.lim {
            return Err(NodeError::TooManyKeywords {
                got: keywords.len(),
                lim: self.config.lim,
            });
        }
        if self.identity.wallet().is_empty() {
            return Err(datashare_core::TokenError::QuotaExhausted { remaining_secs: 0 }.into());
        }
        let (blinded, secret) = mspsi::blind_padded(keywords, self.config.lim, &mut self.rng)?;
        let key = KeyPair::generate(&mut self.rng);
        let published = PublishedQuery {
            query: blinded,
            pk_q: *key.public(),
        };
        self.spend(&Announcement::Query(published).to_bytes(), server)?;
        let (blinding, padded, real_count) = secret.to_parts();
        let id = self.state.next_query;
        self.state.next_query += 1;
        self.state.queries.push(OutstandingQuery {
            id,
            keywords: keywords.iter().map(|k| String::from_utf8_lossy(k).into_owned()).collect(),
            blinding,
            padded: padded.iter().map(hex::encode).collect(),
            real_count,
            key: key.clone(),
            posted_at: now,
            reports: Vec::new(),
            flagged: Vec::new(),
            watching: Vec::new(),
        });
        let mut notices = Vec::new();
        let events = self.messenger.add_listening_key(key, server, now)?;
        self.handle_events(events, now, &mut notices)?;
        self.watch_owners(server, now, &mut notices)?;
        Ok(id)
    }

    /// Makes sure every live query watches every listed owner's key.
    fn watch_owners(&mut self, server: &dyn CommServer, now: Millis, notices: &mut Vec<Notice>) -> Result<(), NodeError> {
        let own = *self.identity.nym();
        let owners: Vec<(Nym, GroupElement)> = self
            .records
            .values()
            .filter(|l| l.record.nym != own)
            .map(|l| (l.record.nym, l.record.pk))
            .collect();
        let lifetime = self.config.query_lifetime;
        for qi in 0..self.state.queries.len() {
            let q = &self.state.queries[qi];
            if now >= q.posted_at + lifetime {
                continue;
            }
            let (id, key) = (q.id, q.key.clone());
            for (nym, pk) in &owners {
                if self.state.queries[qi].watching.contains(pk) {
                    continue;
                }
                self.state.queries[qi].watching.push(*pk);
                let tag = WatchTag::Reply { query: id, owner: *nym };
                let events = self.messenger.watch(&key, pk, tag, server, now)?;
                self.handle_events(events, now, notices)?;
            }
        }
        Ok(())
    }

    /// Reads new bulletin entries and reacts to each.
    pub fn sync(&mut self, server: &dyn CommServer, now: Millis) -> Result<Vec<Notice>, NodeError> {
        let mut notices = Vec::new();
        let entries = server.read(self.state.cursor)?;
        let mut directory_changed = false;
        for entry in entries {
            self.state.cursor = entry.seq;
            match parse_bulletin(&entry.payload) {
                Some(BulletinItem::CoverKey(ann)) => {
                    let events = self.messenger.observe_cover_key(&ann, entry.posted_at, server, now)?;
                    self.handle_events(events, now, &mut notices)?;
                }
                Some(BulletinItem::Authorized(bundle)) => {
                    directory_changed |= self.on_bundle(&bundle, entry.seq, entry.posted_at, server, now, &mut notices)?;
                }
                Some(BulletinItem::Parameters(_)) => {}
                None => self.state.metrics.invalid_bundles += 1,
            }
        }
        if directory_changed {
            self.watch_owners(server, now, &mut notices)?;
            self.refresh_directory(now);
        }
        Ok(notices)
    }

    /// Returns whether the set of cover recipients may have changed.
    fn on_bundle(
        &mut self,
        bundle: &AuthorizedMessage,
        seq: u64,
        posted_at: Millis,
        server: &dyn CommServer,
        now: Millis,
        notices: &mut Vec<Notice>,
    ) -> Result<bool, NodeError> {
        match verify_authorized(bundle, &self.config.mpk, &mut self.registry, &self.config.policy, now / 1000) {
            Ok(()) => {}
            Err(Rejection::Replay) => {
                self.state.metrics.replays += 1;
                return Ok(false);
            }
            Err(_) => {
                self.state.metrics.invalid_bundles += 1;
                return Ok(false);
            }
        }
        match Announcement::from_bytes(&bundle.message) {
            Ok(Announcement::Record(record)) => {
                self.state.metrics.records_seen += 1;
                let newer = self.records.get(&record.nym).is_none_or(|l| l.seq < seq);
                if newer {
                    self.records.insert(record.nym, Listed { seq, posted_at, record });
                }
                Ok(newer)
            }
            Ok(Announcement::Query(q)) => {
                self.state.metrics.queries_seen += 1;
                if q.query.len() != self.config.lim {
                    self.state.metrics.invalid_bundles += 1;
                    return Ok(false);
                }
                if self.state.queries.iter().any(|mine| mine.key.public() == &q.pk_q) {
                    return Ok(false);
                }
                if now >= posted_at + self.config.query_lifetime {
                    self.state.metrics.stale_queries += 1;
                    return Ok(false);
                }
                self.state.foreign_queries.push((q.pk_q, posted_at));
                self.answer(&q, server, now, notices)?;
                Ok(true)
            }
            Err(_) => {
                self.state.metrics.invalid_bundles += 1;
                Ok(false)
            }
        }
    }

    /// Replies to a query and starts waiting for the querier to talk.
    fn answer(&mut self, q: &PublishedQuery, server: &dyn CommServer, now: Millis, notices: &mut Vec<Notice>) -> Result<(), NodeError> {
        let Some(_) = &self.tags else { return Ok(()) };
        let reply = mspsi::reply_counted(&q.query, self.identity.server_key(), &mut self.state.metrics.reply_ops);
        let payload = Payload::Reply(reply).to_bytes();
        let me = self.identity.medium().clone();
        match self.messenger.send_now(&me, &q.pk_q, &payload, server) {
            Ok(_) => {}
            Err(datashare_messaging::MessagingError::Comm(_)) => {
                self.state.metrics.reply_failures += 1;
                self.state.pending_replies.push(PendingReply {
                    pk_q: q.pk_q,
                    payload,
                });
            }
            Err(e) => {
                self.state.metrics.reply_failures += 1;
                log::warn!("reply failed: {e}");
                return Ok(());
            }
        }
        self.state.metrics.queries_answered += 1;
        self.state.conversations.push(Conversation {
            me: me.clone(),
            peer: q.pk_q,
            query: None,
            peer_nym: Vec::new(),
            lines: Vec::new(),
            last_activity: now,
            partial: Vec::new(),
        });
        let events = self.messenger.watch(&me, &q.pk_q, WatchTag::Conversation, server, now)?;
        self.handle_events(events, now, notices)?;
        notices.push(Notice::Answered { pk_q: q.pk_q });
        Ok(())
    }

    fn conversation_mut(&mut self, me: &GroupElement, peer: &GroupElement) -> Option<&mut Conversation> {
        self.state
            .conversations
            .iter_mut()
            .find(|c| c.me.public() == me && &c.peer == peer)
    }

    fn handle_events(&mut self, events: Vec<Event<WatchTag>>, now: Millis, notices: &mut Vec<Notice>) -> Result<(), NodeError> {
        for event in events {
            match event {
                Event::Delivered(d) => {
                    let Some(tag) = d.tag else { continue };
                    match Payload::from_bytes(&d.payload) {
                        Ok(Payload::Reply(reply)) => {
                            let WatchTag::Reply { query, owner } = tag else {
                                self.state.metrics.bad_payloads += 1;
                                continue;
                            };
                            self.on_reply(query, owner, &d.me, &d.peer, &reply, now, notices)?;
                        }
                        Ok(Payload::Chat { more, text }) => self.on_chat(&d.me, &d.peer, more, &text, now, notices),
                        Err(_) => self.state.metrics.bad_payloads += 1,
                    }
                }
                Event::TimedOut { tag, me, peer } => match tag {
                    WatchTag::Reply { query, owner } => {
                        let answered = self
                            .state
                            .queries
                            .iter()
                            .any(|q| q.id == query && q.report_from(&owner).is_some());
                        if !answered {
                            notices.push(Notice::ReplyTimedOut { query, owner });
                        }
                    }
                    WatchTag::Conversation => {
                        self.state
                            .conversations
                            .retain(|c| !(c.me.public() == &me && c.peer == peer && c.lines.is_empty()));
                    }
                },
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn on_reply(
        &mut self,
        query: u64,
        owner: Nym,
        me: &GroupElement,
        peer: &GroupElement,
        reply: &mspsi::ReplyElements,
        now: Millis,
        notices: &mut Vec<Notice>,
    ) -> Result<(), NodeError> {
        let Some(qi) = self.state.queries.iter().position(|q| q.id == query) else { return Ok(()) };
        if self.state.queries[qi].report_from(&owner).is_some() {
            return Ok(());
        }
        let Some(listed) = self.records.get(&owner) else { return Ok(()) };
        let secret = self.state.queries[qi].secret()?;
        let result = mspsi::process_counted(
            reply,
            &secret,
            &listed.record.filter,
            listed.record.doc_count,
            &mut self.state.metrics.process_ops,
        );
        let q = &mut self.state.queries[qi];
        match result {
            Ok(r) => {
                let report = MatchReport {
                    owner,
                    sizes: r.sizes,
                    matches: r.matches,
                };
                q.reports.push(report.clone());
                self.state.metrics.reports += 1;
                notices.push(Notice::Report { query, report });
                if self.conversation_mut(me, peer).is_none() {
                    let key = self.state.queries[qi].key.clone();
                    self.state.conversations.push(Conversation {
                        me: key,
                        peer: *peer,
                        query: Some(query),
                        peer_nym: owner.to_vec(),
                        lines: Vec::new(),
                        last_activity: now,
                        partial: Vec::new(),
                    });
                }
            }
            Err(_) => {
                if !q.flagged.contains(&owner) {
                    q.flagged.push(owner);
                }
                self.state.metrics.bad_replies += 1;
                notices.push(Notice::BadReply { query, owner });
            }
        }
        Ok(())
    }

    fn on_chat(&mut self, me: &GroupElement, peer: &GroupElement, more: bool, text: &[u8], now: Millis, notices: &mut Vec<Notice>) {
        let Some(conv) = self.conversation_mut(me, peer) else {
            self.state.metrics.bad_payloads += 1;
            return;
        };
        conv.partial.extend_from_slice(text);
        conv.last_activity = now;
        if more {
            return;
        }
        let text = String::from_utf8_lossy(&std::mem::take(&mut conv.partial)).into_owned();
        conv.lines.push(ChatLine {
            at: now,
            outgoing: false,
            text: text.clone(),
        });
        self.state.metrics.chat_received += 1;
        notices.push(Notice::Message {
            me: *me,
            peer: *peer,
            text,
        });
    }

    /// Queues `text` for the conversation between our key `me` and `peer`.
    /// It leaves with the next cover firings towards `peer`.
    pub fn send_message(&mut self, me: &GroupElement, peer: &GroupElement, text: &str, now: Millis) -> Result<(), NodeError> {
        let conv = self.conversation_mut(me, peer).ok_or(NodeError::UnknownPeer)?;
        let key = conv.me.clone();
        conv.lines.push(ChatLine {
            at: now,
            outgoing: true,
            text: text.to_owned(),
        });
        conv.last_activity = now;
        for payload in chat_payloads(text.as_bytes()) {
            self.messenger.hidden_send(&key, peer, &payload, now)?;
        }
        self.state.metrics.chat_sent += 1;
        Ok(())
    }

    /// The most recent conversation opened by a reply from `owner`.
    pub fn conversation_with_owner(&self, owner: &Nym) -> Option<&Conversation> {
        self.state
            .conversations
            .iter()
            .filter(|c| c.query.is_some() && c.peer_nym == owner)
            .max_by_key(|c| c.query)
    }

    pub fn on_prefix(&mut self, prefix: Prefix, server: &dyn CommServer, now: Millis) -> Result<Vec<Notice>, NodeError> {
        let events = self.messenger.on_prefix(prefix, server, now)?;
        let mut notices = Vec::new();
        self.handle_events(events, now, &mut notices)?;
        Ok(notices)
    }

    pub fn on_bulk(&mut self, filter: &CuckooFilter, server: &dyn CommServer, now: Millis) -> Result<Vec<Notice>, NodeError> {
        let events = self.messenger.on_bulk(filter, server, now)?;
        let mut notices = Vec::new();
        self.handle_events(events, now, &mut notices)?;
        Ok(notices)
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        let rotation = self
            .state
            .published_at
            .map(|_| self.identity.rotated_at() + self.config.key_rotation);
        match (self.messenger.next_deadline(), rotation) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Runs everything due by `now`: bulletin processing, key rotation,
    /// cover firings, retries and expiry.
    pub fn tick(&mut self, server: &dyn CommServer, now: Millis) -> Result<Vec<Notice>, NodeError> {
        let mut notices = self.sync(server, now)?;
        self.retry_replies(server);
        if self.is_published() && now >= self.identity.rotated_at() + self.config.key_rotation {
            self.rotate(server, now, &mut notices)?;
        }
        let (events, _) = self.messenger.tick(server, now)?;
        self.handle_events(events, now, &mut notices)?;
        self.expire(now);
        Ok(notices)
    }

    fn retry_replies(&mut self, server: &dyn CommServer) {
        let pending = std::mem::take(&mut self.state.pending_replies);
        let me = self.identity.medium().clone();
        for p in pending {
            if self.messenger.send_now(&me, &p.pk_q, &p.payload, server).is_err() {
                self.state.pending_replies.push(p);
            }
        }
    }

    fn rotate(&mut self, server: &dyn CommServer, now: Millis, notices: &mut Vec<Notice>) -> Result<(), NodeError> {
        if self.identity.wallet().is_empty() {
            return Ok(());
        }
        let old = self.identity.rotate(now, &mut self.rng);
        let events = self.messenger.add_listening_key(self.identity.medium().clone(), server, now)?;
        self.handle_events(events, now, notices)?;
        self.messenger.remove_listening_key(old.public());
        self.publish_record(server, now)?;
        self.state.metrics.rotations += 1;
        Ok(())
    }

    fn expire(&mut self, now: Millis) {
        let lifetime = self.config.query_lifetime;
        let expired: Vec<GroupElement> = self
            .state
            .queries
            .iter()
            .filter(|q| now >= q.posted_at + lifetime)
            .map(|q| *q.key.public())
            .collect();
        for pk in &expired {
            self.messenger.remove_listening_key(pk);
        }
        let before = self.state.foreign_queries.len();
        self.state.foreign_queries.retain(|(_, at)| now < at + lifetime);
        if before != self.state.foreign_queries.len() || !expired.is_empty() {
            self.refresh_directory(now);
        }
        let _ = prune_registry(&mut self.registry, &self.config.policy, now / 1000);
    }

    /// Cover recipients: every other listed contact key, every live
    /// foreign query key, and every recently active conversation peer.
    fn refresh_directory(&mut self, now: Millis) {
        let own = *self.identity.nym();
        let lifetime = self.config.query_lifetime;
        let mut recipients: Vec<GroupElement> = self
            .records
            .values()
            .filter(|l| l.record.nym != own)
            .map(|l| l.record.pk)
            .collect();
        recipients.extend(self.state.foreign_queries.iter().map(|(pk, _)| *pk));
        recipients.extend(
            self.state
                .conversations
                .iter()
                .filter(|c| now < c.last_activity + lifetime)
                .map(|c| c.peer),
        );
        self.messenger.set_directory(&recipients, now);
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            identity: self.identity.save(),
            state: serde_json::to_value(&self.state).expect("state serializes"),
            messenger: self.messenger.snapshot(),
            records: self
                .records
                .values()
                .map(|l| (l.seq, l.posted_at, l.record.to_bytes()))
                .collect(),
            tags: self.tags.as_ref().map(TagCollection::to_bytes),
        }
    }

    /// Rebuilds a node from a snapshot. Call [`start`](Self::start) before
    /// driving it.
    pub fn restore(config: SystemConfig, snapshot: NodeSnapshot, registry: SpendRegistry, seed: u64) -> Result<Self, NodeError> {
        let identity = JournalistIdentity::load(snapshot.identity)?;
        let messenger = Messenger::restore(messenger_config(&config, *identity.nym()), snapshot.messenger, seed);
        let mut records = BTreeMap::new();
        for (seq, posted_at, bytes) in snapshot.records {
            let record = Record::from_bytes(&bytes)?;
            records.insert(record.nym, Listed { seq, posted_at, record });
        }
        Ok(Node {
            config,
            identity,
            messenger,
            registry,
            tags: snapshot.tags.map(|b| TagCollection::from_bytes(&b)).transpose()?,
            records,
            state: serde_json::from_value(snapshot.state)?,
            rng: ChaCha20Rng::seed_from_u64(seed ^ 0x6e6f_6465),
        })
    }

    /// A fresh 64-bit seed from the node's generator.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

/// Compresses the tag collection at the target rate, growing the table if
/// insertion runs out of room.
fn compress(tags: &TagCollection, fpr: f64) -> Result<CuckooFilter, NodeError> {
    let mut params = CuckooParams::with_target_fpr(tags.len(), fpr);
    loop {
        match CuckooFilter::compress(tags.tags(), params) {
            Err(CuckooError::Capacity { .. } | CuckooError::TooManyElements(_)) if params.bucket_count < u32::MAX / 2 => {
                params.bucket_count *= 2;
            }
            other => return Ok(other?),
        }
    }
}
