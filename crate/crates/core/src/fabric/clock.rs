use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Duration;

use crate::SimTime;

struct Scheduled<E> {
    at: SimTime,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        self.at == other.at && self.seq == other.seq
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    // BinaryHeap is a max-heap; invert so the earliest (time, seq) pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.at, other.seq).cmp(&(self.at, self.seq))
    }
}

/// Logical clock plus pending-event queue.
///
/// Events pop in `(time, insertion sequence)` order, so events scheduled for
/// the same instant dispatch FIFO. `now` never moves backwards.
pub struct SimClock<E> {
    now: SimTime,
    seq: u64,
    pending: BinaryHeap<Scheduled<E>>,
    seed: u64,
}

impl<E> SimClock<E> {
    pub fn new(seed: u64) -> Self {
        SimClock {
            now: SimTime::ZERO,
            seq: 0,
            pending: BinaryHeap::new(),
            seed,
        }
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Schedules `event` at `at`, clamped to `now` if it lies in the past.
    pub fn schedule_at(&mut self, at: SimTime, event: E) {
        let at = at.max(self.now);
        self.pending.push(Scheduled {
            at,
            seq: self.seq,
            event,
        });
        self.seq += 1;
    }

    pub fn schedule_in(&mut self, delay: Duration, event: E) {
        self.schedule_at(self.now + delay, event);
    }

    pub fn peek_time(&self) -> Option<SimTime> {
        self.pending.peek().map(|s| s.at)
    }

    pub fn pop(&mut self) -> Option<(SimTime, E)> {
        let s = self.pending.pop()?;
        self.now = s.at;
        Some((s.at, s.event))
    }

    /// Moves `now` forward without dispatching. Has no effect if `t` is
    /// earlier than `now`.
    pub fn advance_to(&mut self, t: SimTime) {
        debug_assert!(
            self.peek_time().is_none_or(|p| p >= t),
            "advance past a pending event"
        );
        self.now = self.now.max(t);
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_then_fifo_order() {
        let mut c = SimClock::new(7);
        c.schedule_at(SimTime::from_millis(5), "b");
        c.schedule_at(SimTime::from_millis(1), "a");
        c.schedule_at(SimTime::from_millis(5), "c");
        let order: Vec<_> = std::iter::from_fn(|| c.pop()).map(|(_, e)| e).collect();
        assert_eq!(order, ["a", "b", "c"]);
        assert_eq!(c.now(), SimTime::from_millis(5));
    }

    #[test]
    fn past_events_clamp_to_now() {
        let mut c = SimClock::new(0);
        c.schedule_at(SimTime::from_secs(1), 1);
        c.pop();
        c.schedule_at(SimTime::ZERO, 2);
        assert_eq!(c.pop(), Some((SimTime::from_secs(1), 2)));
    }
}
