//! Whole-system simulation: journalists publish, search each other and talk
//! over cover traffic, all through full nodes on simulated time.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use datashare_core::crypto::{hash_bytes, Domain, ELEMENT_SIZE};
use datashare_core::mspsi::{self, Corpus, Keyword, OpCounts};
use datashare_core::tokens::{verify_authorized, RateLimitPolicy, SpendRegistry};
use datashare_messaging::ENVELOPE_LEN;
use datashare_node::wire::{parse_bulletin, Announcement, BulletinItem};
use datashare_node::{journalist_setup, system_setup, Node, Notice};
use datashare_pigeonhole::clock::{Millis, DAY, MINUTE};
use datashare_pigeonhole::{CommServer, Monitor, Store, StoreConfig};
use parking_lot::Mutex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;

use crate::clock::VirtualClock;
use crate::ledger::{self, CostLedger, CountingServer, PartyCosts, SharedLedger};
use crate::{SimConfig, SimError, MB, START};

/// Messages each way in the scripted conversation.
pub const CONVERSATION_ROUNDS: usize = 5;
/// Each conversation message must arrive within the delay that an
/// exponential wait exceeds with this probability.
pub const LATENCY_TAIL: f64 = 1e-4;

#[derive(Clone, Debug, Default, Serialize)]
pub struct ReportCheck {
    pub queries: usize,
    /// Reports expected: one per query and other journalist.
    pub expected: usize,
    pub exact: usize,
    /// Reports that overcount only, as a filter false positive would.
    pub overcounts: usize,
    /// Reports missing or undercounting.
    pub wrong: usize,
    /// Per-document counts that were too high.
    pub false_positive_docs: usize,
    pub docs_checked: usize,
}

impl ReportCheck {
    pub fn all_correct_modulo_fpr(&self, fpr: f64) -> bool {
        self.wrong == 0 && self.false_positive_docs as f64 <= (self.docs_checked as f64 * fpr * 10.0).max(1.0)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConversationOutcome {
    /// Send-to-display delay of every message in order, in minutes.
    pub latency_min: Vec<f64>,
    pub bound_min: f64,
    pub completed: bool,
}

impl ConversationOutcome {
    pub fn within_bound(&self) -> bool {
        self.completed && self.latency_min.iter().all(|l| *l <= self.bound_min)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PartySummary {
    pub party: usize,
    pub queries_issued: u64,
    pub queries_answered: u64,
    pub publish_ops: OpCounts,
    pub reply_ops: OpCounts,
    pub process_ops: OpCounts,
    pub costs: PartyCosts,
    /// Records, queries and replies with their frames.
    pub search_bytes: u64,
    /// Everything else: cover envelopes, cover keys and notifications.
    pub cover_bytes: u64,
}

/// One owner's day at the target population, extrapolated from what one
/// answer costs in the simulation.
#[derive(Clone, Debug, Serialize)]
pub struct OwnerDaily {
    pub journalists: usize,
    pub queries_per_journalist_day: f64,
    pub answers_per_day: f64,
    pub seconds_per_answer: f64,
    pub compute_s: f64,
    pub reply_mb_padded: f64,
    pub reply_mb_unpadded: f64,
    pub query_download_mb: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct E2eReport {
    pub config: SimConfig,
    pub trace_hash: String,
    pub reports: ReportCheck,
    pub conversation: ConversationOutcome,
    pub parties: Vec<PartySummary>,
    pub owner_daily: Option<OwnerDaily>,
    pub record_fpr: f64,
}

impl E2eReport {
    pub fn cover_dominates(&self) -> bool {
        self.parties.iter().all(|p| p.cover_bytes > p.search_bytes)
    }

    pub const CSV_HEADER: &'static str = "party,queries_issued,queries_answered,publish_exp,reply_exp,process_exp,\
process_tag_hashes,wire_sent,wire_received,search_bytes,cover_bytes";

    pub fn csv_rows(&self) -> Vec<String> {
        self.parties
            .iter()
            .map(|p| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    p.party,
                    p.queries_issued,
                    p.queries_answered,
                    p.publish_ops.exponentiations,
                    p.reply_ops.exponentiations,
                    p.process_ops.exponentiations,
                    p.process_ops.tag_hashes,
                    p.costs.wire_sent,
                    p.costs.wire_received,
                    p.search_bytes,
                    p.cover_bytes
                )
            })
            .collect()
    }
}

enum Ev {
    Query(usize),
    Converse,
}

struct Peer {
    node: Node,
    server: CountingServer,
    monitor: Monitor,
    docs: Vec<Vec<Keyword>>,
}

fn kw(i: usize) -> Keyword {
    format!("kw{i}").into_bytes()
}

fn brute_force(docs: &[Vec<Keyword>], query: &BTreeSet<Keyword>) -> (Vec<usize>, usize) {
    let sizes: Vec<usize> = docs.iter().map(|d| d.iter().filter(|k| query.contains(*k)).count()).collect();
    let matches = sizes.iter().filter(|&&s| s == query.len()).count();
    (sizes, matches)
}

struct Chat {
    querier: usize,
    owner: usize,
    query: Option<u64>,
    sent_at: HashMap<String, Millis>,
    latency: Vec<f64>,
    next: usize,
    done: bool,
}

pub fn run_e2e_sim(cfg: &SimConfig) -> Result<E2eReport, SimError> {
    cfg.validate()?;
    if cfg.key_rate.is_some_and(|k| (k - cfg.cover_rate / 4.0).abs() > 1e-9) {
        return Err(SimError::BadConfig("nodes refresh cover keys at a quarter of the cover rate"));
    }
    let n = cfg.journalists;
    let end = START + cfg.duration();
    let query_end = START + cfg.duration() * 4 / 5;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut clock: VirtualClock<Ev> = VirtualClock::new(START);
    let store = Arc::new(Store::new(StoreConfig::default(), clock.handle()));
    let shared: SharedLedger = Arc::new(Mutex::new(CostLedger::new(n).recording()));

    let expected_queries = (cfg.queries_per_day * cfg.days).ceil() as u32;
    let policy = RateLimitPolicy {
        tokens_per_epoch: (expected_queries * 3 + 20).max(RateLimitPolicy::default().tokens_per_epoch),
        ..RateLimitPolicy::default()
    };
    let mut org = system_setup("in-process", policy, &mut rng);
    org.config.cover_rate = cfg.cover_rate;

    let mut peers = Vec::with_capacity(n);
    for i in 0..n {
        let mut id = journalist_setup(&mut org.issuer, &format!("journalist-{i}"), START, &mut rng)?;
        id.fetch_tokens(&mut org.issuer, policy.tokens_per_epoch as usize, START, &mut rng)?;
        let mut node = Node::new(org.config.clone(), id, SpendRegistry::in_memory(), cfg.seed.wrapping_mul(7919).wrapping_add(i as u64));
        let server = CountingServer::new(store.clone(), shared.clone(), i);
        node.start(&server, START)?;
        let monitor = server.monitor(START)?;
        let docs: Vec<Vec<Keyword>> = (0..cfg.docs_per_journalist)
            .map(|_| {
                rand::seq::index::sample(&mut rng, cfg.vocabulary, cfg.keywords_per_doc)
                    .into_iter()
                    .map(kw)
                    .collect()
            })
            .collect();
        peers.push(Peer { node, server, monitor, docs });
    }
    for p in peers.iter_mut() {
        p.node.publish(&Corpus::new(p.docs.clone()), &p.server, START)?;
    }

    if cfg.queries_per_day > 0.0 {
        let gap = Exp::new(cfg.queries_per_day / DAY as f64).expect("positive rate");
        for i in 0..n {
            let mut t = START + 30 * MINUTE;
            loop {
                t += gap.sample(&mut rng).round() as Millis;
                if t >= query_end {
                    break;
                }
                clock.schedule(t, Ev::Query(i));
            }
        }
    }
    clock.schedule(START + 10 * MINUTE, Ev::Converse);

    let mut trace: Vec<u8> = Vec::new();
    let mut issued: Vec<(usize, u64, BTreeSet<Keyword>)> = Vec::new();
    let mut chat = Chat {
        querier: 0,
        owner: 1,
        query: None,
        sent_at: HashMap::new(),
        latency: Vec::new(),
        next: 0,
        done: false,
    };

    fn handle(
        i: usize,
        notices: Vec<Notice>,
        now: Millis,
        peers: &mut [Peer],
        chat: &mut Chat,
        trace: &mut Vec<u8>,
    ) -> Result<(), SimError> {
        for notice in notices {
            trace.extend(format!("{now} {i} {notice:?}\n").bytes());
            match notice {
                Notice::Report { query, report } if i == chat.querier && Some(query) == chat.query && chat.next == 0 => {
                    if report.owner != *peers[chat.owner].node.identity().nym() {
                        continue;
                    }
                    let conv = peers[i]
                        .node
                        .conversation_with_owner(&report.owner)
                        .ok_or_else(|| SimError::Diverged("no conversation after a report".into()))?
                        .clone();
                    peers[i].node.send_message(conv.me.public(), &conv.peer, "q0", now)?;
                    chat.sent_at.insert("q0".into(), now);
                    chat.next = 1;
                }
                Notice::Message { me, peer, text } => {
                    let Some(sent) = chat.sent_at.get(&text) else { continue };
                    chat.latency.push((now - sent) as f64 / MINUTE as f64);
                    let round: usize = text[1..].parse().unwrap_or(usize::MAX);
                    let reply = if i == chat.owner && text.starts_with('q') {
                        Some(format!("o{round}"))
                    } else if i == chat.querier && text.starts_with('o') && round + 1 < CONVERSATION_ROUNDS {
                        Some(format!("q{}", round + 1))
                    } else {
                        chat.done |= i == chat.querier && round + 1 == CONVERSATION_ROUNDS;
                        None
                    };
                    if let Some(reply) = reply {
                        peers[i].node.send_message(&me, &peer, &reply, now)?;
                        chat.sent_at.insert(reply, now);
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    loop {
        let next_tick = peers.iter().filter_map(|p| p.node.next_deadline()).min();
        let Some(t) = [next_tick, clock.peek_time()].into_iter().flatten().min() else { break };
        if t > end {
            break;
        }
        clock.advance_to(t);
        for i in 0..n {
            if peers[i].node.next_deadline().is_some_and(|d| d <= t) {
                let Peer { node, server, .. } = &mut peers[i];
                let notices = node.tick(server, t)?;
                handle(i, notices, t, &mut peers, &mut chat, &mut trace)?;
            }
        }
        while let Some((_, ev)) = clock.pop_until(t) {
            let (i, keywords) = match ev {
                Ev::Query(i) => {
                    let len = rng.gen_range(1..=3usize);
                    let keywords: BTreeSet<Keyword> = if rng.gen_bool(0.5) {
                        let owner = (i + rng.gen_range(1..n)) % n;
                        let doc = peers[owner].docs.choose(&mut rng).expect("non-empty corpus");
                        doc.choose_multiple(&mut rng, len.min(doc.len())).cloned().collect()
                    } else {
                        rand::seq::index::sample(&mut rng, cfg.vocabulary, len).into_iter().map(kw).collect()
                    };
                    (i, keywords)
                }
                Ev::Converse => {
                    let doc = &peers[chat.owner].docs[0];
                    (chat.querier, doc.iter().take(2).cloned().collect())
                }
            };
            let list: Vec<Keyword> = keywords.iter().cloned().collect();
            let Peer { node, server, .. } = &mut peers[i];
            let id = node.query(&list, server, t)?;
            if chat.query.is_none() && i == chat.querier {
                chat.query = Some(id);
            }
            issued.push((i, id, keywords));
        }
        for _ in 0..4 {
            let mut quiet = true;
            for i in 0..n {
                let prefixes: Vec<_> = peers[i].monitor.feed.try_iter().collect();
                peers[i].server.charge_notifications(prefixes.len());
                for prefix in prefixes {
                    quiet = false;
                    let Peer { node, server, .. } = &mut peers[i];
                    let notices = node.on_prefix(prefix, server, t)?;
                    handle(i, notices, t, &mut peers, &mut chat, &mut trace)?;
                }
            }
            if quiet {
                break;
            }
        }
    }

    // Ground truth for every query against every other journalist.
    let mut check = ReportCheck::default();
    for (i, id, keywords) in &issued {
        check.queries += 1;
        let q = peers[*i]
            .node
            .queries()
            .iter()
            .find(|q| q.id == *id)
            .ok_or_else(|| SimError::Diverged(format!("query {id} of {i} vanished")))?;
        for (j, owner) in peers.iter().enumerate().filter(|(j, _)| j != i) {
            check.expected += 1;
            let _ = j;
            let Some(report) = q.report_from(owner.node.identity().nym()) else {
                check.wrong += 1;
                continue;
            };
            let (sizes, matches) = brute_force(&owner.docs, keywords);
            check.docs_checked += sizes.len();
            if report.sizes == sizes && report.matches == matches {
                check.exact += 1;
                continue;
            }
            let under = report.sizes.len() != sizes.len() || report.sizes.iter().zip(&sizes).any(|(got, want)| got < want);
            if under {
                check.wrong += 1;
            } else {
                check.overcounts += 1;
                check.false_positive_docs += report.sizes.iter().zip(&sizes).filter(|(g, w)| g > w).count();
            }
        }
    }

    let bound_min = -LATENCY_TAIL.ln() / cfg.cover_rate * (DAY / MINUTE) as f64;
    let conversation = ConversationOutcome {
        latency_min: chat.latency.clone(),
        bound_min,
        completed: chat.done && chat.latency.len() == 2 * CONVERSATION_ROUNDS,
    };

    let ledger = shared.lock();
    let put_frames = ledger::put_request_len(ENVELOPE_LEN) + ledger::put_response_len();
    let hit_frames = ledger::get_request_len() + ledger::get_response_len(Some(ENVELOPE_LEN));
    let parties: Vec<PartySummary> = peers
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let m = p.node.metrics();
            let costs = ledger.parties[i].clone();
            let stats = p.node.messenger().stats();
            let search = (costs.bulletin_wire - costs.cover_key_wire)
                + stats.direct_sent * put_frames
                + (m.reports + m.bad_replies) * hit_frames;
            PartySummary {
                party: i,
                queries_issued: p.node.queries().len() as u64,
                queries_answered: m.queries_answered,
                publish_ops: m.publish_ops,
                reply_ops: m.reply_ops,
                process_ops: m.process_ops,
                search_bytes: search,
                cover_bytes: costs.wire_total().saturating_sub(search),
                costs,
            }
        })
        .collect();

    for p in ledger.transcript.iter().flatten() {
        trace.extend_from_slice(&p.at.to_be_bytes());
        trace.extend_from_slice(&(p.party as u64).to_be_bytes());
        trace.extend_from_slice(&p.addr);
    }
    let trace_hash = hex_digest(&hash_bytes(Domain::Trace, &[&trace]));
    drop(ledger);

    let owner_daily = owner_daily_cost(&store, &peers, &org.config.policy, 1000, 10.0)?;
    Ok(E2eReport {
        config: cfg.clone(),
        trace_hash,
        reports: check,
        conversation,
        parties,
        owner_daily,
        record_fpr: org.config.record_fpr,
    })
}

fn hex_digest(d: &[u8]) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

/// Times one owner answering a real query from the simulation (bundle
/// check plus reply) and scales to `journalists` journalists each querying
/// `per_day` times a day.
fn owner_daily_cost(
    store: &Arc<Store>,
    peers: &[Peer],
    policy: &RateLimitPolicy,
    journalists: usize,
    per_day: f64,
) -> Result<Option<OwnerDaily>, SimError> {
    let entries = store.bb_read(0);
    let Some((entry, bundle, query)) = entries.iter().find_map(|e| match parse_bulletin(&e.payload)? {
        BulletinItem::Authorized(b) => match Announcement::from_bytes(&b.message).ok()? {
            Announcement::Query(q) => Some((e, b, q)),
            _ => None,
        },
        _ => None,
    }) else {
        return Ok(None);
    };
    let owner = &peers[peers.len() - 1].node;
    let key = owner.identity().server_key();
    let mpk = owner.config().mpk;
    let reps = 20;
    let started = Instant::now();
    let mut reply = None;
    for _ in 0..reps {
        let mut registry = SpendRegistry::in_memory();
        verify_authorized(&bundle, &mpk, &mut registry, policy, entry.posted_at / 1000)
            .map_err(|r| SimError::Diverged(format!("simulated query bundle rejected: {r:?}")))?;
        reply = Some(mspsi::reply(&query.query, key));
    }
    let seconds_per_answer = started.elapsed().as_secs_f64() / reps as f64;
    let reply = reply.expect("at least one repetition");
    let answers = per_day * (journalists - 1) as f64;
    let unpadded = 1 + reply.len() * ELEMENT_SIZE;
    Ok(Some(OwnerDaily {
        journalists,
        queries_per_journalist_day: per_day,
        answers_per_day: answers,
        seconds_per_answer,
        compute_s: seconds_per_answer * answers,
        reply_mb_padded: answers * ENVELOPE_LEN as f64 / MB,
        reply_mb_unpadded: answers * unpadded as f64 / MB,
        query_download_mb: answers * ledger::entry_len(entry.payload.len()) as f64 / MB,
    }))
}
