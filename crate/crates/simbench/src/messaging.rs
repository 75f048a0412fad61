//! Cover-traffic simulations.
//!
//! [`run_full_stack`] drives real messengers against an in-process mailbox
//! store: real envelopes, real notification feeds, real cover keys on the
//! bulletin board. It is exact but costs a few microseconds of cryptography
//! per envelope, so it is used at small populations for latency and as the
//! reference for the accounting model.
//!
//! [`run_bandwidth_model`] replays the same traffic pattern without any
//! cryptography and charges every frame its serialized size, which makes a
//! thousand journalists sending millions of envelopes a day tractable.

use std::collections::HashMap;
use std::sync::Arc;

use datashare_core::crypto::KeyPair;
use datashare_messaging::{CoverAnnouncement, CoverRates, Event, Messenger, MessengerConfig, Nym, ENVELOPE_LEN, NYM_SIZE};
use datashare_pigeonhole::clock::{Millis, DAY, HOUR, MINUTE, SECOND};
use datashare_pigeonhole::store::PREFIX_SIZE;
use datashare_pigeonhole::{CommServer, Monitor, Store, StoreConfig};
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::clock::VirtualClock;
use crate::ledger::{self, CostLedger, CountingServer, EnvelopeBalance, PartyCosts, PutRecord, SharedLedger};
use crate::stats::{mean, power_law_exponent, quantile};
use crate::{SimError, MB, START};

/// Full-stack run parameters.
#[derive(Clone, Debug, Serialize)]
pub struct FullStackConfig {
    pub journalists: usize,
    pub rate: f64,
    pub key_rate: f64,
    pub days: f64,
    pub seed: u64,
    /// Mean pause between a conversation message leaving its queue and the
    /// next one on the same channel being written. `None` runs cover only.
    pub think: Option<Millis>,
    /// How often every journalist reads the bulletin board.
    pub bulletin_poll: Millis,
    /// Extra conversation messages `(offset from start, from, to)`.
    pub scripted: Vec<(Millis, usize, usize)>,
    /// Keep the server's view of every upload.
    pub record_transcript: bool,
}

impl FullStackConfig {
    pub fn new(journalists: usize, rate: f64, days: f64, seed: u64) -> Self {
        FullStackConfig {
            journalists,
            rate,
            key_rate: rate / 4.0,
            days,
            seed,
            think: Some((DAY as f64 / rate) as Millis),
            bulletin_poll: HOUR,
            scripted: Vec::new(),
            record_transcript: false,
        }
    }

    pub fn cover_only(mut self) -> Self {
        self.think = None;
        self
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FullStackReport {
    pub journalists: usize,
    pub rate: f64,
    pub days: f64,
    /// Queue-to-upload delay of every conversation message, in minutes.
    pub send_latency_min: Vec<f64>,
    /// Queue-to-decryption delay at the recipient, in minutes.
    pub delivery_latency_min: Vec<f64>,
    pub costs: Vec<PartyCosts>,
    pub balance: EnvelopeBalance,
    pub dummies_received: u64,
    pub send_failures: u64,
    pub transcript: Vec<PutRecord>,
}

impl FullStackReport {
    pub fn mean_latency_min(&self) -> f64 {
        mean(&self.send_latency_min)
    }

    pub fn p95_latency_min(&self) -> f64 {
        quantile(&self.send_latency_min, 0.95)
    }

    /// Average bytes on the wire per journalist per day.
    pub fn bytes_per_journalist_day(&self) -> f64 {
        let total: u64 = self.costs.iter().map(PartyCosts::wire_total).sum();
        total as f64 / self.journalists as f64 / self.days
    }
}

enum Ev {
    /// A conversation message from `from` to `to` is written.
    Enqueue { from: usize, to: usize },
    Poll(usize),
}

struct Journalist {
    contact: KeyPair,
    messenger: Messenger<u64>,
    server: CountingServer,
    monitor: Monitor,
    cursor: u64,
}

fn nym(i: usize) -> Nym {
    let mut n = [0u8; NYM_SIZE];
    n[..8].copy_from_slice(&(i as u64).to_be_bytes());
    n
}

pub fn run_full_stack(cfg: &FullStackConfig) -> Result<FullStackReport, SimError> {
    if cfg.journalists < 2 || !(cfg.rate > 0.0) || !(cfg.key_rate > 0.0) || !(cfg.days > 0.0) {
        return Err(SimError::BadConfig("need two journalists and positive rates and duration"));
    }
    let n = cfg.journalists;
    let end = START + (cfg.days * DAY as f64) as Millis;
    let mut clock: VirtualClock<Ev> = VirtualClock::new(START);
    let store = Arc::new(Store::new(StoreConfig::default(), clock.handle()));
    let retention = store.config().retention;
    let mut ledger = CostLedger::new(n);
    if cfg.record_transcript {
        ledger = ledger.recording();
    }
    let shared: SharedLedger = Arc::new(Mutex::new(ledger));
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let think = cfg.think.map(|m| Exp::new(1.0 / m.max(1) as f64).expect("positive mean"));

    let contacts: Vec<KeyPair> = (0..n).map(|_| KeyPair::generate(&mut rng)).collect();
    let index: HashMap<[u8; 32], usize> = contacts.iter().enumerate().map(|(i, k)| (k.public().to_bytes(), i)).collect();
    let mut people = Vec::with_capacity(n);
    for (i, contact) in contacts.iter().enumerate() {
        let mut config = MessengerConfig::new(
            nym(i),
            CoverRates {
                send_per_day: cfg.rate,
                key_per_day: cfg.key_rate,
            },
        );
        config.receive_timeout = end - START + 30 * DAY;
        let server = CountingServer::new(store.clone(), shared.clone(), i);
        let monitor = server.monitor(START)?;
        let mut messenger = Messenger::new(config, cfg.seed.wrapping_mul(1000).wrapping_add(i as u64));
        messenger.add_listening_key(contact.clone(), &server, START)?;
        messenger.set_directory(contacts.iter().map(KeyPair::public), START);
        for (k, peer) in contacts.iter().enumerate() {
            if k != i {
                messenger.watch(contact, peer.public(), k as u64, &server, START)?;
            }
        }
        messenger.go_online(START)?;
        people.push(Journalist {
            contact: contact.clone(),
            messenger,
            server,
            monitor,
            cursor: 0,
        });
    }
    for i in 0..n {
        clock.schedule(START + cfg.bulletin_poll * (i as u64 + 1) / n as u64, Ev::Poll(i));
        if let Some(think) = &think {
            for k in (0..n).filter(|&k| k != i) {
                let gap = think.sample(&mut rng).round() as Millis;
                clock.schedule(START + gap, Ev::Enqueue { from: i, to: k });
            }
        }
    }
    if think.is_some() && !cfg.scripted.is_empty() {
        return Err(SimError::BadConfig("scripted messages need a cover-only run"));
    }
    for &(offset, from, to) in &cfg.scripted {
        if from >= n || to >= n || from == to {
            return Err(SimError::BadConfig("scripted message between unknown journalists"));
        }
        clock.schedule(START + offset, Ev::Enqueue { from, to });
    }

    let mut send_latency = Vec::new();
    let mut delivery_latency = Vec::new();
    let mut deliveries = |events: Vec<Event<u64>>| -> Result<(), SimError> {
        for e in events {
            match e {
                Event::Delivered(d) if d.tag.is_some() => {
                    let sent_at = u64::from_be_bytes(
                        d.payload
                            .get(..8)
                            .and_then(|b| b.try_into().ok())
                            .ok_or_else(|| SimError::Diverged("short conversation payload".into()))?,
                    );
                    delivery_latency.push((d.at - sent_at) as f64 / MINUTE as f64);
                }
                Event::Delivered(_) => {}
                Event::TimedOut { .. } => return Err(SimError::Diverged("a receive watch timed out".into())),
            }
        }
        Ok(())
    };

    loop {
        let next_tick = people.iter().filter_map(|p| p.messenger.next_deadline()).min();
        let next_event = clock.peek_time();
        let Some(t) = [next_tick, next_event].into_iter().flatten().min() else { break };
        if t > end {
            break;
        }
        clock.advance_to(t);
        for i in 0..n {
            let p = &mut people[i];
            if !p.messenger.next_deadline().is_some_and(|d| d <= t) {
                continue;
            }
            let (events, sent) = p.messenger.tick(&p.server, t)?;
            deliveries(events)?;
            for rec in sent {
                let Some(latency) = rec.latency else { continue };
                send_latency.push(latency as f64 / MINUTE as f64);
                if let Some(think) = &think {
                    let to = index[&rec.recipient.to_bytes()];
                    let gap = think.sample(&mut rng).round() as Millis;
                    clock.schedule(rec.at + gap, Ev::Enqueue { from: i, to });
                }
            }
        }
        while let Some((at, ev)) = clock.pop_until(t) {
            match ev {
                Ev::Enqueue { from, to } => {
                    let recipient = *people[to].contact.public();
                    let p = &mut people[from];
                    let sender = p.contact.clone();
                    p.messenger.hidden_send(&sender, &recipient, &at.to_be_bytes(), at)?;
                }
                Ev::Poll(i) => {
                    let p = &mut people[i];
                    let entries = p.server.read(p.cursor)?;
                    for e in entries {
                        p.cursor = e.seq;
                        if let Some(ann) = CoverAnnouncement::from_bytes(&e.payload) {
                            let events = p.messenger.observe_cover_key(&ann, e.posted_at, &p.server, at)?;
                            deliveries(events)?;
                        }
                    }
                    clock.schedule(at + cfg.bulletin_poll, Ev::Poll(i));
                }
            }
        }
        for p in people.iter_mut() {
            let prefixes: Vec<_> = p.monitor.feed.try_iter().collect();
            p.server.charge_notifications(prefixes.len());
            for prefix in prefixes {
                let events = p.messenger.on_prefix(prefix, &p.server, t)?;
                deliveries(events)?;
            }
        }
    }

    let mut l = shared.lock();
    l.expire(end, retention);
    let stats: Vec<_> = people.iter().map(|p| p.messenger.stats()).collect();
    Ok(FullStackReport {
        journalists: n,
        rate: cfg.rate,
        days: cfg.days,
        send_latency_min: send_latency,
        delivery_latency_min: delivery_latency,
        costs: l.parties.clone(),
        balance: l.balance(),
        dummies_received: stats.iter().map(|s| s.dummies_received).sum(),
        send_failures: stats.iter().map(|s| s.send_failures).sum(),
        transcript: l.transcript.take().unwrap_or_default(),
    })
}

/// Parameters of the accounting model.
#[derive(Clone, Debug, Serialize)]
pub struct BandwidthConfig {
    pub journalists: usize,
    pub rate: f64,
    pub key_rate: f64,
    pub days: f64,
    pub seed: u64,
    /// The server batches feed prefixes into one frame per window.
    pub feed_window: Millis,
    pub bulletin_poll: Millis,
    /// How long a superseded cover key stays watched.
    pub key_grace: Millis,
}

impl BandwidthConfig {
    pub fn new(journalists: usize, rate: f64, days: f64, seed: u64) -> Self {
        let key_rate = rate / 4.0;
        BandwidthConfig {
            journalists,
            rate,
            key_rate,
            days,
            seed,
            feed_window: SECOND,
            bulletin_poll: HOUR,
            key_grace: (DAY as f64 / key_rate) as Millis,
        }
    }
}

/// Bytes per journalist per day, by cause.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Breakdown {
    /// Uploading envelopes: put requests and acknowledgements.
    pub puts: f64,
    /// Fetching envelopes that were there.
    pub fetches: f64,
    /// Live notification feed frames.
    pub feed: f64,
    /// Publishing and reading cover keys.
    pub bulletin: f64,
    /// The empty probe of the next slot after every fetch.
    pub next_slot_probes: f64,
    /// Probes woken by another channel's 2-byte prefix.
    pub collision_probes: f64,
}

impl Breakdown {
    /// Envelopes with their frames, notifications and cover keys.
    pub fn model_total(&self) -> f64 {
        self.puts + self.fetches + self.feed + self.bulletin
    }

    /// Everything, including empty probes.
    pub fn total(&self) -> f64 {
        self.model_total() + self.next_slot_probes + self.collision_probes
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BandwidthReport {
    pub journalists: usize,
    pub rate: f64,
    pub days: f64,
    pub puts: u64,
    pub fetched: u64,
    pub expired: u64,
    /// Envelopes on keys the receivers had not yet learned when the run ended.
    pub waiting: u64,
    pub per_journalist: Breakdown,
}

impl BandwidthReport {
    pub fn model_mb_per_journalist_day(&self) -> f64 {
        self.per_journalist.model_total() / MB
    }

    pub fn total_mb_per_journalist_day(&self) -> f64 {
        self.per_journalist.total() / MB
    }
}

/// One cover key of one sender: the prefix of the next slot on each of its
/// channels, by recipient.
struct CoverKey {
    sender: u32,
    prefixes: Vec<u16>,
    /// Envelopes sent on each channel before receivers learned the key.
    backlog: Vec<u32>,
    watched: bool,
    retired: bool,
}

enum ModelEv {
    Refresh,
    Poll,
    Retire(u32),
}

struct Buckets(Vec<Vec<(u32, u32)>>);

impl Buckets {
    fn new() -> Self {
        Buckets(vec![Vec::new(); 1 << (8 * PREFIX_SIZE)])
    }

    fn insert(&mut self, prefix: u16, key: u32, recipient: u32) {
        self.0[prefix as usize].push((key, recipient));
    }

    fn remove(&mut self, prefix: u16, key: u32, recipient: u32) {
        let b = &mut self.0[prefix as usize];
        if let Some(i) = b.iter().position(|e| *e == (key, recipient)) {
            b.swap_remove(i);
        }
    }

    fn len(&self, prefix: u16) -> usize {
        self.0[prefix as usize].len()
    }
}

/// Every journalist sends to every other at `rate` per day from its current
/// cover key; receivers watch each live key's channels and probe on prefix
/// matches, exactly as the messenger does, but only sizes are tracked.
pub fn run_bandwidth_model(cfg: &BandwidthConfig) -> Result<BandwidthReport, SimError> {
    if cfg.journalists < 2 || !(cfg.rate > 0.0) || !(cfg.key_rate > 0.0) || !(cfg.days > 0.0) || cfg.feed_window == 0 {
        return Err(SimError::BadConfig("need two journalists and positive rates, duration and window"));
    }
    let n = cfg.journalists;
    let end = (cfg.days * DAY as f64) as Millis;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let per_ms = |per_day: f64| Exp::new(per_day / DAY as f64).expect("positive rate");
    let put_gap = per_ms(cfg.rate * (n * (n - 1)) as f64);
    let refresh_gap = per_ms(cfg.key_rate * n as f64);
    let key_age = per_ms(cfg.key_rate);

    let put_frames = ledger::put_request_len(ENVELOPE_LEN) + ledger::put_response_len();
    let hit_frames = ledger::get_request_len() + ledger::get_response_len(Some(ENVELOPE_LEN));
    let miss_frames = ledger::get_request_len() + ledger::get_response_len(None);
    let announce = CoverAnnouncement::LEN;
    let broadcast_frames = ledger::broadcast_request_len(announce) + ledger::broadcast_response_len();
    let read_base = ledger::read_request_len() + ledger::read_response_len(&[]);
    let per_entry = ledger::entry_len(announce);

    let mut keys: Vec<CoverKey> = Vec::new();
    let mut current: Vec<u32> = Vec::with_capacity(n);
    let mut buckets = Buckets::new();
    let mut clock: VirtualClock<ModelEv> = VirtualClock::new(0);
    let fresh = |rng: &mut ChaCha20Rng, sender: usize| CoverKey {
        sender: sender as u32,
        prefixes: (0..n).map(|_| rng.gen()).collect(),
        backlog: Vec::new(),
        watched: false,
        retired: false,
    };
    let watch = |key: &mut CoverKey, id: u32, buckets: &mut Buckets| {
        key.watched = true;
        for r in (0..key.prefixes.len()).filter(|&r| r != key.sender as usize) {
            buckets.insert(key.prefixes[r], id, r as u32);
        }
    };

    // Start in the stationary state: the current key's age is exponential,
    // and the one before it is still watched if it was superseded less than
    // a grace period ago.
    for j in 0..n {
        let age = key_age.sample(&mut rng).round() as Millis;
        if age < cfg.key_grace {
            let id = keys.len() as u32;
            let mut k = fresh(&mut rng, j);
            watch(&mut k, id, &mut buckets);
            keys.push(k);
            clock.schedule(cfg.key_grace - age, ModelEv::Retire(id));
        }
        let id = keys.len() as u32;
        let mut k = fresh(&mut rng, j);
        watch(&mut k, id, &mut buckets);
        keys.push(k);
        current.push(id);
    }
    clock.schedule(refresh_gap.sample(&mut rng).round() as Millis, ModelEv::Refresh);
    clock.schedule(cfg.bulletin_poll, ModelEv::Poll);

    let mut bytes = Breakdown::default();
    let (mut puts, mut fetched, mut expired) = (0u64, 0u64, 0u64);
    let mut pending: Vec<u32> = Vec::new();
    let mut announced = 0usize;
    let mut window: Option<(u64, usize)> = None;
    let mut next_put = put_gap.sample(&mut rng).round() as Millis;

    loop {
        let next_event = clock.peek_time().unwrap_or(Millis::MAX);
        if next_put.min(next_event) >= end {
            break;
        }
        if next_put < next_event {
            let t = next_put;
            next_put += put_gap.sample(&mut rng).round() as Millis;
            let sender = rng.gen_range(0..n);
            let recipient = (sender + rng.gen_range(1..n)) % n;
            let id = current[sender];
            let prefix = keys[id as usize].prefixes[recipient];
            puts += 1;
            bytes.puts += put_frames as f64;
            let w = t / cfg.feed_window;
            window = match window {
                Some((cur, k)) if cur == w => Some((cur, k + 1)),
                Some((_, k)) => {
                    bytes.feed += (n as u64 * ledger::feed_frame_len(k)) as f64;
                    Some((w, 1))
                }
                None => Some((w, 1)),
            };
            let watchers = buckets.len(prefix);
            if keys[id as usize].watched {
                fetched += 1;
                bytes.fetches += hit_frames as f64;
                bytes.next_slot_probes += miss_frames as f64;
                bytes.collision_probes += ((watchers - 1) as u64 * miss_frames) as f64;
                let next: u16 = rng.gen();
                buckets.remove(prefix, id, recipient as u32);
                buckets.insert(next, id, recipient as u32);
                keys[id as usize].prefixes[recipient] = next;
            } else {
                bytes.collision_probes += (watchers as u64 * miss_frames) as f64;
                let k = &mut keys[id as usize];
                if k.backlog.is_empty() {
                    k.backlog = vec![0; n];
                }
                k.backlog[recipient] += 1;
            }
            continue;
        }
        let (t, ev) = clock.pop().expect("peeked");
        match ev {
            ModelEv::Refresh => {
                let sender = rng.gen_range(0..n);
                let id = keys.len() as u32;
                keys.push(fresh(&mut rng, sender));
                let old = std::mem::replace(&mut current[sender], id);
                clock.schedule(t + cfg.key_grace, ModelEv::Retire(old));
                pending.push(id);
                announced += 1;
                bytes.bulletin += broadcast_frames as f64;
                clock.schedule(t + refresh_gap.sample(&mut rng).round() as Millis, ModelEv::Refresh);
            }
            ModelEv::Retire(id) => {
                let k = &mut keys[id as usize];
                k.retired = true;
                expired += k.backlog.iter().map(|&b| u64::from(b)).sum::<u64>();
                k.backlog = Vec::new();
                if k.watched {
                    k.watched = false;
                    for r in (0..n).filter(|&r| r != k.sender as usize) {
                        buckets.remove(k.prefixes[r], id, r as u32);
                    }
                }
            }
            ModelEv::Poll => {
                // Learning a key, each receiver probes its channel from the
                // first slot: every waiting envelope, then one empty slot.
                for id in pending.drain(..) {
                    let k = &mut keys[id as usize];
                    if k.retired {
                        continue;
                    }
                    let waiting: u64 = k.backlog.iter().map(|&b| u64::from(b)).sum();
                    fetched += waiting;
                    bytes.fetches += (waiting * hit_frames) as f64;
                    bytes.next_slot_probes += ((n as u64 - 1) * miss_frames) as f64;
                    k.backlog = Vec::new();
                    watch(k, id, &mut buckets);
                }
                bytes.bulletin += (n as u64 * (read_base + announced as u64 * per_entry)) as f64;
                announced = 0;
                clock.schedule(t + cfg.bulletin_poll, ModelEv::Poll);
            }
        }
    }
    if let Some((_, k)) = window {
        bytes.feed += (n as u64 * ledger::feed_frame_len(k)) as f64;
    }

    let scale = 1.0 / (n as f64 * cfg.days);
    let per_journalist = Breakdown {
        puts: bytes.puts * scale,
        fetches: bytes.fetches * scale,
        feed: bytes.feed * scale,
        bulletin: bytes.bulletin * scale,
        next_slot_probes: bytes.next_slot_probes * scale,
        collision_probes: bytes.collision_probes * scale,
    };
    Ok(BandwidthReport {
        journalists: n,
        rate: cfg.rate,
        days: cfg.days,
        puts,
        fetched,
        expired,
        waiting: keys.iter().flat_map(|k| &k.backlog).map(|&b| u64::from(b)).sum(),
        per_journalist,
    })
}

/// Fits `total = a N^b` to the model totals over several population sizes.
pub fn population_exponent(reports: &[BandwidthReport], total: impl Fn(&Breakdown) -> f64) -> f64 {
    let xs: Vec<f64> = reports.iter().map(|r| r.journalists as f64).collect();
    let ys: Vec<f64> = reports.iter().map(|r| total(&r.per_journalist) * r.journalists as f64).collect();
    power_law_exponent(&xs, &ys)
}

/// One CSV row of `simbench messaging`.
#[derive(Clone, Debug, Serialize)]
pub struct MessagingRow {
    pub journalists: usize,
    pub rate: f64,
    pub days: f64,
    pub latency_journalists: usize,
    pub latency_samples: usize,
    pub mean_latency_min: f64,
    pub p95_latency_min: f64,
    pub model_mb_per_day: f64,
    pub total_mb_per_day: f64,
    pub breakdown: Breakdown,
}

impl MessagingRow {
    pub const CSV_HEADER: &'static str = "journalists,rate_per_day,days,latency_journalists,latency_samples,\
mean_latency_min,p95_latency_min,model_mb_per_journalist_day,total_mb_per_journalist_day,\
put_mb,fetch_mb,feed_mb,bulletin_mb,next_slot_probe_mb,collision_probe_mb";

    pub fn csv(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{:.2},{:.2},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3},{:.3}",
            self.journalists,
            self.rate,
            self.days,
            self.latency_journalists,
            self.latency_samples,
            self.mean_latency_min,
            self.p95_latency_min,
            self.model_mb_per_day,
            self.total_mb_per_day,
            b.puts / MB,
            b.fetches / MB,
            b.feed / MB,
            b.bulletin / MB,
            b.next_slot_probes / MB,
            b.collision_probes / MB
        )
    }
}

/// Latency journalists are capped: latency depends only on the rate, and the
/// full stack costs real cryptography per envelope.
pub const LATENCY_JOURNALISTS: usize = 6;

/// Latency from a full-stack run with up to [`LATENCY_JOURNALISTS`]
/// journalists, bandwidth from the accounting model at the requested size.
pub fn run_messaging_sim(journalists: usize, rate: f64, days: f64, seed: u64) -> Result<MessagingRow, SimError> {
    let small = journalists.clamp(2, LATENCY_JOURNALISTS);
    let latency = run_full_stack(&FullStackConfig::new(small, rate, days, seed))?;
    let model = run_bandwidth_model(&BandwidthConfig::new(journalists, rate, days, seed))?;
    Ok(MessagingRow {
        journalists,
        rate,
        days,
        latency_journalists: small,
        latency_samples: latency.send_latency_min.len(),
        mean_latency_min: latency.mean_latency_min(),
        p95_latency_min: latency.p95_latency_min(),
        model_mb_per_day: model.model_mb_per_journalist_day(),
        total_mb_per_day: model.total_mb_per_journalist_day(),
        breakdown: model.per_journalist,
    })
}
