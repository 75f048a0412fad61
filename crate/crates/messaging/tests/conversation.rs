use std::sync::Arc;

use datashare_core::crypto::KeyPair;
use datashare_messaging::{
    CoverAnnouncement, CoverRates, Event, Messenger, MessengerConfig, MessengerSnapshot, ENVELOPE_LEN,
};
use datashare_pigeonhole::clock::{Millis, DAY, HOUR};
use datashare_pigeonhole::{Clock, CommServer, ManualClock, Monitor, Store, StoreConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

struct Party {
    key: KeyPair,
    messenger: Messenger<String>,
    monitor: Monitor,
    inbox: Vec<(Millis, Vec<u8>)>,
    timeouts: Vec<String>,
}

struct World {
    clock: ManualClock,
    store: Arc<Store>,
    parties: Vec<Party>,
    bulletin_seq: u64,
}

impl World {
    fn new(n: usize, rate: f64, seed: u64) -> Self {
        let clock = ManualClock::new(0);
        let store = Arc::new(Store::new(StoreConfig::default(), Arc::new(clock.clone())));
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut parties: Vec<Party> = (0..n)
            .map(|i| {
                let key = KeyPair::generate(&mut rng);
                let config = MessengerConfig::new([i as u8; 16], CoverRates::with_send_rate(rate));
                let mut messenger = Messenger::new(config, seed * 100 + i as u64);
                messenger.add_listening_key(key.clone(), &store, 0).unwrap();
                Party {
                    key,
                    messenger,
                    monitor: store.monitor(0).unwrap(),
                    inbox: Vec::new(),
                    timeouts: Vec::new(),
                }
            })
            .collect();
        let directory: Vec<_> = parties.iter().map(|p| *p.key.public()).collect();
        for p in &mut parties {
            p.messenger.set_directory(&directory, 0);
            p.messenger.go_online(0).unwrap();
        }
        World {
            clock,
            store,
            parties,
            bulletin_seq: 0,
        }
    }

    fn record(p: &mut Party, events: Vec<Event<String>>, now: Millis) {
        for e in events {
            match e {
                Event::Delivered(d) => p.inbox.push((now, d.payload)),
                Event::TimedOut { tag, .. } => p.timeouts.push(tag),
            }
        }
    }

    /// Delivers bulletin updates and notifications until quiescent.
    fn settle(&mut self) {
        let now = self.clock.now();
        let entries = self.store.read(self.bulletin_seq).unwrap();
        for e in &entries {
            self.bulletin_seq = e.seq;
            if let Some(ann) = CoverAnnouncement::from_bytes(&e.payload) {
                for p in &mut self.parties {
                    let ev = p.messenger.observe_cover_key(&ann, e.posted_at, &self.store, now).unwrap();
                    Self::record(p, ev, now);
                }
            }
        }
        for p in &mut self.parties {
            while let Ok(prefix) = p.monitor.feed.try_recv() {
                let ev = p.messenger.on_prefix(prefix, &self.store, now).unwrap();
                Self::record(p, ev, now);
            }
        }
    }

    fn run_until(&mut self, end: Millis) {
        loop {
            let next = self.parties.iter().filter_map(|p| p.messenger.next_deadline()).min();
            let Some(t) = next.filter(|t| *t <= end) else { break };
            self.clock.set(t);
            for i in 0..self.parties.len() {
                let p = &mut self.parties[i];
                let (ev, _) = p.messenger.tick(&self.store, t).unwrap();
                Self::record(p, ev, t);
                self.settle();
            }
        }
        self.clock.set(end);
        self.settle();
    }
}

#[test]
fn five_messages_each_way() {
    let mut w = World::new(3, 48.0, 1);
    w.run_until(HOUR);
    let (a, b) = (w.parties[0].key.clone(), w.parties[1].key.clone());
    let now = w.clock.now();
    let ev = w.parties[0].messenger.watch(&a, b.public(), "from-b".to_string(), &w.store, now).unwrap();
    assert!(ev.is_empty());
    let ev = w.parties[1].messenger.watch(&b, a.public(), "from-a".to_string(), &w.store, now).unwrap();
    assert!(ev.is_empty());
    for i in 0..5u8 {
        w.parties[0].messenger.hidden_send(&a, b.public(), &[b'a', i], now).unwrap();
        w.parties[1].messenger.hidden_send(&b, a.public(), &[b'b', i], now).unwrap();
    }
    w.run_until(now + 2 * DAY);
    let got_b: Vec<_> = w.parties[1].inbox.iter().map(|(_, m)| m.clone()).collect();
    let got_a: Vec<_> = w.parties[0].inbox.iter().map(|(_, m)| m.clone()).collect();
    assert_eq!(got_b, (0..5u8).map(|i| vec![b'a', i]).collect::<Vec<_>>());
    assert_eq!(got_a, (0..5u8).map(|i| vec![b'b', i]).collect::<Vec<_>>());
    assert!(w.parties[2].inbox.is_empty());

    let stats = w.parties[0].messenger.stats();
    assert_eq!(stats.real_sent, 5);
    assert!(stats.dummy_sent > 50);
    assert!(w.parties[2].messenger.stats().dummies_received > 50);
    assert_eq!(w.parties[2].messenger.stats().garbage_received, 0);
}

#[test]
fn watch_times_out_after_seven_days() {
    let mut w = World::new(2, 4.0, 2);
    let (a, b) = (w.parties[0].key.clone(), w.parties[1].key.clone());
    w.parties[0].messenger.watch(&a, b.public(), "quiet".to_string(), &w.store, 0).unwrap();
    w.run_until(7 * DAY - 1);
    assert!(w.parties[0].timeouts.is_empty());
    w.run_until(7 * DAY + HOUR);
    assert_eq!(w.parties[0].timeouts, vec!["quiet".to_string()]);
}

#[test]
fn decoy_prefix_then_real_message() {
    let mut w = World::new(2, 4.0, 3);
    let (a, b) = (w.parties[0].key.clone(), w.parties[1].key.clone());
    w.parties[1].messenger.watch(&b, a.public(), "x".to_string(), &w.store, 0).unwrap();
    let expected = w.parties[1].messenger.channel(b.public(), a.public()).unwrap().receive_slot().addr;
    let mut decoy = expected;
    decoy[31] ^= 0xff;
    w.store.put(&decoy, &vec![0u8; ENVELOPE_LEN]).unwrap();
    let before = w.parties[1].messenger.stats().empty_probes;
    w.settle();
    assert_eq!(w.parties[1].messenger.stats().empty_probes, before + 1);
    assert!(w.parties[1].inbox.is_empty());

    w.parties[0].messenger.send_now(&a, b.public(), b"real", &w.store).unwrap();
    w.settle();
    assert_eq!(w.parties[1].inbox.len(), 1);
    assert_eq!(w.parties[1].inbox[0].1, b"real");
}

#[test]
fn garbage_at_full_address_is_discarded() {
    let mut w = World::new(2, 4.0, 4);
    let (a, b) = (w.parties[0].key.clone(), w.parties[1].key.clone());
    w.parties[1].messenger.watch(&b, a.public(), "x".to_string(), &w.store, 0).unwrap();
    let squat = w.parties[1].messenger.channel(b.public(), a.public()).unwrap().receive_slot().addr;
    w.store.put(&squat, &vec![7u8; ENVELOPE_LEN]).unwrap();
    w.settle();
    assert_eq!(w.parties[1].messenger.stats().garbage_received, 1);
    // The sender finds its first slot taken and moves on; the receiver follows.
    w.parties[0].messenger.send_now(&a, b.public(), b"after", &w.store).unwrap();
    w.settle();
    assert_eq!(w.parties[1].inbox.iter().map(|(_, m)| m.as_slice()).collect::<Vec<_>>(), [b"after"]);
    let sent = w.parties[0].messenger.channel(a.public(), b.public()).unwrap().sent();
    let recv = w.parties[1].messenger.channel(b.public(), a.public()).unwrap().received();
    assert_eq!(sent, recv);
}

#[test]
fn offline_sender_publishes_key_before_sending() {
    let mut w = World::new(2, 4.0, 5);
    let (a, b) = (w.parties[0].key.clone(), w.parties[1].key.clone());
    w.parties[1].messenger.watch(&b, a.public(), "x".to_string(), &w.store, 0).unwrap();
    w.parties[0].messenger.go_offline();
    w.parties[0].messenger.hidden_send(&a, b.public(), b"later", 0).unwrap();
    w.run_until(2 * DAY);
    assert!(w.parties[1].inbox.is_empty());
    let keys_before = w.parties[0].messenger.stats().cover_keys_published;
    w.parties[0].messenger.go_online(2 * DAY).unwrap();
    w.run_until(10 * DAY);
    assert!(w.parties[0].messenger.stats().cover_keys_published > keys_before);
    let fresh_key = w
        .store
        .read(0)
        .unwrap()
        .into_iter()
        .find(|e| e.posted_at >= 2 * DAY && CoverAnnouncement::from_bytes(&e.payload).is_some_and(|a| a.nym == [0u8; 16]))
        .unwrap();
    assert_eq!(fresh_key.posted_at, 2 * DAY);
    let (t, m) = &w.parties[1].inbox[0];
    assert_eq!(m, b"later");
    assert!(*t > 2 * DAY);
}

#[test]
fn snapshot_restores_counters_and_watches() {
    let mut w = World::new(2, 4.0, 6);
    let (a, b) = (w.parties[0].key.clone(), w.parties[1].key.clone());
    w.parties[1].messenger.watch(&b, a.public(), "x".to_string(), &w.store, 0).unwrap();
    w.parties[0].messenger.send_now(&a, b.public(), b"one", &w.store).unwrap();
    w.settle();
    let snap = w.parties[1].messenger.snapshot();
    let json = serde_json::to_string(&snap).unwrap();
    let snap: MessengerSnapshot<String> = serde_json::from_str(&json).unwrap();
    let config = w.parties[1].messenger.config().clone();
    let mut restored = Messenger::restore(config, snap, 77);
    assert_eq!(restored.channel(b.public(), a.public()).unwrap().received(), 1);
    w.parties[0].messenger.send_now(&a, b.public(), b"two", &w.store).unwrap();
    let prefix = datashare_pigeonhole::store::prefix_of(
        &w.parties[0].messenger.channel(a.public(), b.public()).unwrap().send_slot(1).addr,
    );
    let ev = restored.on_prefix(prefix, &w.store, 0).unwrap();
    assert!(matches!(&ev[..], [Event::Delivered(d)] if d.payload == b"two"));
}
