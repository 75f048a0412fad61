//! Poisson cover-traffic schedule and per-recipient send queues.
//!
//! The scheduler is a pure state machine over absolute deadlines: callers
//! ask for the next deadline, advance time, and receive the actions that
//! fell due. Timing never depends on queue contents.

use std::collections::{BTreeMap, VecDeque};

use datashare_core::crypto::{GroupElement, KeyPair, ELEMENT_SIZE};
use datashare_pigeonhole::clock::{Millis, DAY};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

type KeyBytes = [u8; ELEMENT_SIZE];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoverRates {
    /// Messages per day to each recipient.
    pub send_per_day: f64,
    /// Cover-key refreshes per day.
    pub key_per_day: f64,
}

impl CoverRates {
    /// Key refresh at a quarter of the send rate.
    pub fn with_send_rate(send_per_day: f64) -> Self {
        CoverRates {
            send_per_day,
            key_per_day: send_per_day / 4.0,
        }
    }

    pub fn mean_gap(&self) -> Millis {
        (DAY as f64 / self.send_per_day) as Millis
    }
}

/// A conversation message waiting for its recipient's next firing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QueuedMessage {
    pub sender: KeyPair,
    #[serde(with = "hex::serde")]
    pub payload: Vec<u8>,
    pub enqueued_at: Millis,
}

#[derive(Clone, Debug)]
pub enum CoverAction {
    /// Publish a fresh cover key; dummies use it from now on.
    RefreshKey { at: Millis },
    /// One firing for `recipient`: the head of its queue, or a dummy.
    Send {
        at: Millis,
        recipient: GroupElement,
        message: Option<QueuedMessage>,
    },
}

impl CoverAction {
    pub fn at(&self) -> Millis {
        match self {
            CoverAction::RefreshKey { at } | CoverAction::Send { at, .. } => *at,
        }
    }
}

struct Recipient {
    pk: GroupElement,
    due: Millis,
}

/// FIFO queues keyed by recipient public key.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SendQueues {
    queues: BTreeMap<String, VecDeque<QueuedMessage>>,
}

impl SendQueues {
    fn key(pk: &GroupElement) -> String {
        hex::encode(pk.to_bytes())
    }

    pub fn push(&mut self, recipient: &GroupElement, message: QueuedMessage) {
        self.queues.entry(Self::key(recipient)).or_default().push_back(message);
    }

    /// Puts a message back at the head of its queue after a failed send.
    pub fn push_front(&mut self, recipient: &GroupElement, message: QueuedMessage) {
        self.queues.entry(Self::key(recipient)).or_default().push_front(message);
    }

    pub fn pop(&mut self, recipient: &GroupElement) -> Option<QueuedMessage> {
        let key = Self::key(recipient);
        let q = self.queues.get_mut(&key)?;
        let m = q.pop_front();
        if q.is_empty() {
            self.queues.remove(&key);
        }
        m
    }

    pub fn len(&self, recipient: &GroupElement) -> usize {
        self.queues.get(&Self::key(recipient)).map_or(0, VecDeque::len)
    }

    pub fn total(&self) -> usize {
        self.queues.values().map(VecDeque::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.is_empty()
    }
}

pub struct CoverScheduler {
    rates: CoverRates,
    send_gap: Exp<f64>,
    key_gap: Exp<f64>,
    rng: ChaCha20Rng,
    online: bool,
    key_due: Millis,
    /// Set when coming online; the key goes out before any send.
    key_now: Option<Millis>,
    recipients: BTreeMap<KeyBytes, Recipient>,
    queues: SendQueues,
}

impl CoverScheduler {
    pub fn new(rates: CoverRates, seed: u64) -> Self {
        let per_ms = |per_day: f64| Exp::new(per_day / DAY as f64).expect("positive rate");
        CoverScheduler {
            send_gap: per_ms(rates.send_per_day),
            key_gap: per_ms(rates.key_per_day),
            rates,
            rng: ChaCha20Rng::seed_from_u64(seed),
            online: false,
            key_due: 0,
            key_now: None,
            recipients: BTreeMap::new(),
            queues: SendQueues::default(),
        }
    }

    pub fn rates(&self) -> &CoverRates {
        &self.rates
    }

    pub fn is_online(&self) -> bool {
        self.online
    }

    fn draw(&mut self, gap: Exp<f64>) -> Millis {
        gap.sample(&mut self.rng).round() as Millis
    }

    /// Starts the process: a cover key is due immediately and every
    /// recipient draws a fresh delay from `now`.
    pub fn go_online(&mut self, now: Millis) {
        if self.online {
            return;
        }
        self.online = true;
        self.key_now = Some(now);
        self.key_due = now + self.draw(self.key_gap);
        let keys: Vec<KeyBytes> = self.recipients.keys().copied().collect();
        for k in keys {
            let due = now + self.draw(self.send_gap);
            self.recipients.get_mut(&k).unwrap().due = due;
        }
    }

    /// Cancels all pending firings. Queued messages are kept.
    pub fn go_offline(&mut self) {
        self.online = false;
        self.key_now = None;
    }

    /// Replaces the recipient set. New recipients draw a first delay from
    /// `now`; existing ones keep their schedule.
    pub fn set_recipients<'a>(&mut self, recipients: impl IntoIterator<Item = &'a GroupElement>, now: Millis) {
        let mut next = BTreeMap::new();
        for pk in recipients {
            let key = pk.to_bytes();
            if next.contains_key(&key) {
                continue;
            }
            let entry = match self.recipients.remove(&key) {
                Some(r) => r,
                None => Recipient {
                    pk: *pk,
                    due: now + self.draw(self.send_gap),
                },
            };
            next.insert(key, entry);
        }
        self.recipients = next;
    }

    pub fn recipient_count(&self) -> usize {
        self.recipients.len()
    }

    pub fn enqueue(&mut self, recipient: &GroupElement, message: QueuedMessage) {
        self.queues.push(recipient, message);
    }

    pub fn requeue(&mut self, recipient: &GroupElement, message: QueuedMessage) {
        self.queues.push_front(recipient, message);
    }

    pub fn queues(&self) -> &SendQueues {
        &self.queues
    }

    pub fn restore_queues(&mut self, queues: SendQueues) {
        self.queues = queues;
    }

    pub fn next_deadline(&self) -> Option<Millis> {
        if !self.online {
            return None;
        }
        if let Some(t) = self.key_now {
            return Some(t);
        }
        let sends = self.recipients.values().map(|r| r.due).min();
        Some(sends.map_or(self.key_due, |s| s.min(self.key_due)))
    }

    /// Every action due at or before `now`, in time order. Ties put key
    /// refreshes first, then recipients in key order.
    pub fn poll(&mut self, now: Millis) -> Vec<CoverAction> {
        let mut out = Vec::new();
        if !self.online {
            return out;
        }
        if let Some(at) = self.key_now.take() {
            out.push(CoverAction::RefreshKey { at });
        }
        loop {
            let next_send = self
                .recipients
                .iter()
                .min_by_key(|(_, r)| r.due)
                .map(|(k, r)| (*k, r.due));
            let key_first = next_send.map_or(true, |(_, due)| self.key_due <= due);
            if key_first {
                if self.key_due > now {
                    break;
                }
                out.push(CoverAction::RefreshKey { at: self.key_due });
                self.key_due += self.draw(self.key_gap);
                continue;
            }
            let (key, due) = next_send.unwrap();
            if due > now {
                break;
            }
            let gap = self.draw(self.send_gap);
            let r = self.recipients.get_mut(&key).unwrap();
            r.due += gap;
            let pk = r.pk;
            let message = self.queues.pop(&pk);
            out.push(CoverAction::Send {
                at: due,
                recipient: pk,
                message,
            });
        }
        out
    }
}
