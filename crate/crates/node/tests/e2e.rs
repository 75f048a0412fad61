use std::collections::BTreeSet;
use std::sync::Arc;

use datashare_core::mspsi::{Corpus, Keyword};
use datashare_core::tokens::{RateLimitPolicy, SpendRegistry};
use datashare_node::persist::StateDir;
use datashare_node::{journalist_setup, system_setup, Node, NodeError, Notice, Organization};
use datashare_pigeonhole::clock::{Millis, DAY, HOUR};
use datashare_pigeonhole::{Clock, CommServer, ManualClock, Monitor, Store, StoreConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

struct Peer {
    node: Node,
    monitor: Monitor,
    notices: Vec<Notice>,
}

struct World {
    clock: ManualClock,
    store: Arc<Store>,
    org: Organization,
    peers: Vec<Peer>,
}

const START: Millis = 400 * DAY;

impl World {
    fn new(n: usize, seed: u64) -> Self {
        let clock = ManualClock::new(START);
        let store = Arc::new(Store::new(StoreConfig::default(), Arc::new(clock.clone())));
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut org = system_setup("in-process", RateLimitPolicy::default(), &mut rng);
        org.config.cover_rate = 24.0;
        let mut peers = Vec::new();
        for i in 0..n {
            let mut id = journalist_setup(&mut org.issuer, &format!("j{i}"), START, &mut rng).unwrap();
            id.fetch_tokens(&mut org.issuer, 10, START, &mut rng).unwrap();
            let mut node = Node::new(org.config.clone(), id, SpendRegistry::in_memory(), seed * 1000 + i as u64);
            node.start(&store, START).unwrap();
            peers.push(Peer {
                node,
                monitor: store.monitor(START).unwrap(),
                notices: Vec::new(),
            });
        }
        World { clock, store, org, peers }
    }

    fn now(&self) -> Millis {
        self.clock.now()
    }

    /// Lets every node read the bulletin and drain its notifications until
    /// nothing changes.
    fn settle(&mut self) {
        let now = self.now();
        for _ in 0..4 {
            for p in &mut self.peers {
                let n = p.node.sync(&self.store, now).unwrap();
                p.notices.extend(n);
                while let Ok(prefix) = p.monitor.feed.try_recv() {
                    let n = p.node.on_prefix(prefix, &self.store, now).unwrap();
                    p.notices.extend(n);
                }
            }
        }
    }

    fn run_until(&mut self, end: Millis) {
        loop {
            let next = self.peers.iter().filter_map(|p| p.node.next_deadline()).min();
            let Some(t) = next.filter(|t| *t <= end) else { break };
            self.clock.set(t.max(self.now()));
            for i in 0..self.peers.len() {
                let now = self.now();
                if self.peers[i].node.next_deadline().is_some_and(|d| d <= now) {
                    let n = self.peers[i].node.tick(&self.store, now).unwrap();
                    self.peers[i].notices.extend(n);
                }
            }
            self.settle();
        }
        self.clock.set(end.max(self.now()));
        self.settle();
    }

    fn messages(&self, i: usize) -> Vec<String> {
        self.peers[i]
            .notices
            .iter()
            .filter_map(|n| match n {
                Notice::Message { text, .. } => Some(text.clone()),
                _ => None,
            })
            .collect()
    }
}

fn kw(s: &str) -> Keyword {
    s.as_bytes().to_vec()
}

fn random_corpus(rng: &mut ChaCha20Rng, vocab: &[String]) -> Vec<Vec<Keyword>> {
    let docs = rng.gen_range(1..6);
    (0..docs)
        .map(|_| {
            let len = rng.gen_range(1..8);
            vocab.choose_multiple(rng, len).map(|k| kw(k)).collect()
        })
        .collect()
}

fn brute_force(docs: &[Vec<Keyword>], query: &[Keyword]) -> (Vec<usize>, usize) {
    let q: BTreeSet<&Keyword> = query.iter().collect();
    let sizes: Vec<usize> = docs
        .iter()
        .map(|d| d.iter().collect::<BTreeSet<_>>().intersection(&q).count())
        .collect();
    let matches = sizes.iter().filter(|&&s| s == q.len()).count();
    (sizes, matches)
}

#[test]
fn search_reports_match_brute_force() {
    let mut w = World::new(4, 7);
    let mut rng = ChaCha20Rng::seed_from_u64(70);
    let vocab: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
    let corpora: Vec<_> = (1..4).map(|_| random_corpus(&mut rng, &vocab)).collect();
    for (i, docs) in corpora.iter().enumerate() {
        let now = w.now();
        w.peers[i + 1].node.publish(&Corpus::new(docs.clone()), &w.store, now).unwrap();
    }
    w.settle();

    let mut queries = Vec::new();
    for _ in 0..3 {
        let len = rng.gen_range(1..5);
        let q: Vec<Keyword> = vocab.choose_multiple(&mut rng, len).map(|k| kw(k)).collect();
        let now = w.now();
        let id = w.peers[0].node.query(&q, &w.store, now).unwrap();
        queries.push((id, q));
    }
    w.settle();

    for (id, q) in &queries {
        let out = w.peers[0].node.queries().iter().find(|o| o.id == *id).unwrap();
        assert_eq!(out.reports.len(), 3, "query {id} got {} reports", out.reports.len());
        for (j, docs) in corpora.iter().enumerate() {
            let owner = w.peers[j + 1].node.identity().nym();
            let report = out.report_from(owner).unwrap();
            let (sizes, matches) = brute_force(docs, q);
            assert_eq!(report.sizes, sizes);
            assert_eq!(report.matches, matches);
        }
        assert!(out.flagged.is_empty());
    }
    // Owners answer every query; the querier answers none of its own.
    for p in &w.peers[1..] {
        assert_eq!(p.node.metrics().queries_answered, 3);
    }
    assert_eq!(w.peers[0].node.metrics().queries_answered, 0);
}

#[test]
fn replayed_bundle_is_refused() {
    let mut w = World::new(2, 8);
    let now = w.now();
    w.peers[1].node.publish(&Corpus::new(vec![vec![kw("a")]]), &w.store, now).unwrap();
    w.settle();
    assert_eq!(w.peers[0].node.metrics().records_seen, 1);

    let original = w.store.read(0).unwrap().into_iter().find(|e| e.payload.starts_with(b"DSAM")).unwrap();
    w.store.broadcast(&original.payload).unwrap();
    w.settle();
    assert_eq!(w.peers[0].node.metrics().records_seen, 1);
    assert_eq!(w.peers[0].node.metrics().replays, 1);
}

#[test]
fn short_queries_are_padded_and_long_ones_refused() {
    let mut w = World::new(2, 9);
    let now = w.now();
    w.peers[1].node.publish(&Corpus::new(vec![vec![kw("a"), kw("b")]]), &w.store, now).unwrap();
    w.settle();
    let tokens = w.peers[0].node.identity().wallet().len();
    let long: Vec<Keyword> = (0..11).map(|i| kw(&format!("k{i}"))).collect();
    let err = w.peers[0].node.query(&long, &w.store, now).unwrap_err();
    assert!(matches!(err, NodeError::TooManyKeywords { got: 11, lim: 10 }));
    assert_eq!(w.peers[0].node.identity().wallet().len(), tokens);
    assert!(matches!(w.peers[0].node.query(&[], &w.store, now), Err(NodeError::NoKeywords)));

    let id = w.peers[0].node.query(&[kw("a"), kw("b"), kw("z")], &w.store, now).unwrap();
    let posted = w.store.read(0).unwrap().into_iter().last().unwrap();
    let bundle = datashare_core::tokens::AuthorizedMessage::from_bytes(&posted.payload[4..]).unwrap();
    // magic + pk_q + ten elements
    assert_eq!(bundle.message.len(), 4 + 32 * 11);
    w.settle();
    let q = w.peers[0].node.queries().iter().find(|q| q.id == id).unwrap();
    assert_eq!(q.reports[0].sizes, vec![2]);
    assert_eq!(q.reports[0].matches, 0);
}

#[test]
fn empty_corpus_is_refused() {
    let mut w = World::new(1, 10);
    let now = w.now();
    assert!(matches!(
        w.peers[0].node.publish(&Corpus::new(Vec::<Vec<Keyword>>::new()), &w.store, now),
        Err(NodeError::EmptyCorpus)
    ));
    assert!(matches!(
        w.peers[0].node.publish(&Corpus::new(vec![Vec::<Keyword>::new()]), &w.store, now),
        Err(NodeError::EmptyCorpus)
    ));
    assert!(!w.peers[0].node.is_published());
}

#[test]
fn querier_and_owner_converse() {
    let mut w = World::new(3, 11);
    let now = w.now();
    w.peers[1].node.publish(&Corpus::new(vec![vec![kw("leak"), kw("offshore")]]), &w.store, now).unwrap();
    w.settle();
    w.peers[0].node.query(&[kw("offshore")], &w.store, now).unwrap();
    w.settle();

    let owner = *w.peers[1].node.identity().nym();
    let conv = w.peers[0].node.conversation_with_owner(&owner).unwrap().clone();
    assert_eq!(conv.query, Some(0));
    let (q_me, q_peer) = (*conv.me.public(), conv.peer);
    let o_conv = w.peers[1].node.conversations()[0].clone();
    let (o_me, o_peer) = (*o_conv.me.public(), o_conv.peer);
    assert_eq!((o_me, o_peer), (q_peer, q_me));

    let long = "x".repeat(3000);
    for i in 0..5 {
        let now = w.now();
        let text = if i == 4 { long.clone() } else { format!("q{i}") };
        w.peers[0].node.send_message(&q_me, &q_peer, &text, now).unwrap();
        w.peers[1].node.send_message(&o_me, &o_peer, &format!("o{i}"), now).unwrap();
    }
    let end = w.now() + 2 * DAY;
    w.run_until(end);

    let mut want_owner: Vec<String> = (0..4).map(|i| format!("q{i}")).collect();
    want_owner.push(long);
    assert_eq!(w.messages(1), want_owner);
    assert_eq!(w.messages(0), (0..5).map(|i| format!("o{i}")).collect::<Vec<_>>());
    assert!(w.messages(2).is_empty());
}

#[test]
fn snapshot_round_trip_keeps_conversation() {
    let mut w = World::new(2, 12);
    let now = w.now();
    w.peers[1].node.publish(&Corpus::new(vec![vec![kw("a")]]), &w.store, now).unwrap();
    w.settle();
    w.peers[0].node.query(&[kw("a")], &w.store, now).unwrap();
    w.settle();

    let dir = tempfile::tempdir().unwrap();
    let state = StateDir::new(dir.path());
    state.save_config(&w.org.config).unwrap();
    state.save_node(&w.peers[0].node).unwrap();
    let tokens = w.peers[0].node.identity().wallet().len();
    let mut restored = state.load_node(99).unwrap();
    assert_eq!(restored.identity().nym(), w.peers[0].node.identity().nym());
    assert_eq!(restored.identity().wallet().len(), tokens);
    assert_eq!(restored.queries().len(), 1);
    assert_eq!(restored.queries()[0].reports, w.peers[0].node.queries()[0].reports);
    assert_eq!(restored.records().count(), 1);
    restored.start(&w.store, now).unwrap();
    w.peers[0].node = restored;
    w.peers[0].monitor = w.store.monitor(now).unwrap();

    let owner = *w.peers[1].node.identity().nym();
    let conv = w.peers[0].node.conversation_with_owner(&owner).unwrap().clone();
    w.peers[0].node.send_message(conv.me.public(), &conv.peer, "after restart", now).unwrap();
    let end = now + DAY;
    w.run_until(end);
    assert_eq!(w.messages(1), vec!["after restart".to_string()]);
}

#[test]
fn contact_key_rotates_weekly_and_search_continues() {
    let mut w = World::new(2, 13);
    let now = w.now();
    w.peers[1].node.publish(&Corpus::new(vec![vec![kw("a")]]), &w.store, now).unwrap();
    let first = *w.peers[1].node.identity().medium().public();
    w.settle();
    let end = now + 7 * DAY + HOUR;
    w.run_until(end);
    assert_eq!(w.peers[1].node.metrics().rotations, 1);
    let nym = *w.peers[1].node.identity().nym();
    let listed = w.peers[0].node.record(&nym).unwrap().pk;
    assert_ne!(listed, first);
    assert_eq!(listed, *w.peers[1].node.identity().medium().public());

    let now = w.now();
    let id = w.peers[0].node.query(&[kw("a")], &w.store, now).unwrap();
    w.settle();
    let q = w.peers[0].node.queries().iter().find(|q| q.id == id).unwrap();
    assert_eq!(q.reports.len(), 1);
    assert_eq!(q.reports[0].matches, 1);
}
