//! Simulated time: a clock that only advances by popping events.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::sync::Arc;

use datashare_pigeonhole::clock::Millis;
use datashare_pigeonhole::ManualClock;

struct Pending<E> {
    at: Millis,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Pending<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Pending<E> {}

impl<E> PartialOrd for Pending<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Pending<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// An event queue ordered by `(time, insertion order)`. Popping an event
/// moves the clock to its time; scheduling into the past is clamped to now.
pub struct VirtualClock<E> {
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Reverse<Pending<E>>>,
    /// Shared view of the current time for components that read a clock.
    shared: ManualClock,
}

impl<E> VirtualClock<E> {
    pub fn new(start: Millis) -> Self {
        VirtualClock {
            now: start,
            seq: 0,
            queue: BinaryHeap::new(),
            shared: ManualClock::new(start),
        }
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    /// A clock handle that follows this queue, for the mailbox store.
    pub fn handle(&self) -> Arc<ManualClock> {
        Arc::new(self.shared.clone())
    }

    pub fn schedule(&mut self, at: Millis, event: E) {
        let at = at.max(self.now);
        self.queue.push(Reverse(Pending { at, seq: self.seq, event }));
        self.seq += 1;
    }

    pub fn peek_time(&self) -> Option<Millis> {
        self.queue.peek().map(|Reverse(p)| p.at)
    }

    /// Removes the earliest event and advances the clock to it.
    pub fn pop(&mut self) -> Option<(Millis, E)> {
        let Reverse(p) = self.queue.pop()?;
        self.advance_to(p.at);
        Some((p.at, p.event))
    }

    /// Pops the earliest event only if it is due at or before `until`.
    pub fn pop_until(&mut self, until: Millis) -> Option<(Millis, E)> {
        if self.peek_time()? > until {
            return None;
        }
        self.pop()
    }

    /// Moves time forward without an event. Never moves backwards.
    pub fn advance_to(&mut self, t: Millis) {
        if t > self.now {
            self.now = t;
            self.shared.set(t);
        }
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use datashare_pigeonhole::Clock;
    use proptest::prelude::*;

    #[test]
    fn ties_pop_in_insertion_order() {
        let mut c = VirtualClock::new(0);
        c.schedule(5, "b");
        c.schedule(3, "a");
        c.schedule(5, "c");
        let order: Vec<_> = std::iter::from_fn(|| c.pop()).collect();
        assert_eq!(order, vec![(3, "a"), (5, "b"), (5, "c")]);
    }

    #[test]
    fn past_events_are_clamped_and_handle_follows() {
        let mut c = VirtualClock::new(10);
        let h = c.handle();
        c.schedule(20, ());
        c.pop();
        c.schedule(4, ());
        assert_eq!(c.pop(), Some((20, ())));
        assert_eq!(h.now(), 20);
        assert_eq!(c.pop_until(100), None);
    }

    proptest! {
        #[test]
        fn time_never_moves_backwards(times in prop::collection::vec(0u64..1000, 1..200)) {
            let mut c = VirtualClock::new(0);
            for (i, t) in times.iter().enumerate() {
                c.schedule(*t, i);
            }
            let mut last = 0;
            while let Some((t, _)) = c.pop() {
                prop_assert!(t >= last);
                prop_assert_eq!(c.now(), t);
                last = t;
            }
        }
    }
}
