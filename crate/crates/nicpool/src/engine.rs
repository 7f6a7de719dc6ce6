//! Deterministic event queue.
//!
//! Events are ordered by (time, sequence). The sequence number is assigned at
//! push time, so two events scheduled for the same cycle fire in the order
//! they were scheduled. That rule, plus the absence of unordered maps in the
//! simulation state, is what makes runs bit-reproducible.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::units::Cycles;

#[derive(Debug)]
struct Scheduled<T> {
    time: Cycles,
    seq: u64,
    payload: T,
}

impl<T> PartialEq for Scheduled<T> {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl<T> Eq for Scheduled<T> {}

impl<T> Ord for Scheduled<T> {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the earliest event.
        other
            .time
            .cmp(&self.time)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}
impl<T> PartialOrd for Scheduled<T> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
pub struct EventQueue<T> {
    heap: BinaryHeap<Scheduled<T>>,
    next_seq: u64,
    now: Cycles,
    popped: u64,
}

impl<T> Default for EventQueue<T> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0,
            popped: 0,
        }
    }
}

impl<T> EventQueue<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> Cycles {
        self.now
    }

    /// Number of events dispatched so far.
    pub fn dispatched(&self) -> u64 {
        self.popped
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    /// Schedule `payload` at absolute cycle `at`. Events may not be scheduled
    /// in the past; clamping to `now` would silently reorder causality, so
    /// this panics instead (it indicates a simulator bug, not bad input).
    pub fn push_at(&mut self, at: Cycles, payload: T) {
        assert!(at >= self.now, "event scheduled in the past: {at} < {}", self.now);
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Scheduled { time: at, seq, payload });
    }

    pub fn push_after(&mut self, delay: Cycles, payload: T) {
        self.push_at(self.now + delay, payload);
    }

    /// Pop the next event at or before `horizon`, advancing the clock to it.
    pub fn pop_until(&mut self, horizon: Cycles) -> Option<(Cycles, T)> {
        match self.heap.peek() {
            Some(ev) if ev.time <= horizon => {
                let ev = self.heap.pop().unwrap();
                debug_assert!(ev.time >= self.now);
                self.now = ev.time;
                self.popped += 1;
                Some((ev.time, ev.payload))
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pops_in_time_order() {
        let mut q = EventQueue::new();
        q.push_at(30, "c");
        q.push_at(10, "a");
        q.push_at(20, "b");
        let mut out = Vec::new();
        while let Some((t, p)) = q.pop_until(u64::MAX) {
            out.push((t, p));
        }
        assert_eq!(out, vec![(10, "a"), (20, "b"), (30, "c")]);
    }

    #[test]
    fn same_cycle_fifo() {
        let mut q = EventQueue::new();
        for i in 0..100 {
            q.push_at(5, i);
        }
        let mut out = Vec::new();
        while let Some((_, p)) = q.pop_until(u64::MAX) {
            out.push(p);
        }
        assert_eq!(out, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn horizon_stops_dispatch() {
        let mut q = EventQueue::new();
        q.push_at(10, ());
        q.push_at(20, ());
        assert!(q.pop_until(15).is_some());
        assert!(q.pop_until(15).is_none());
        assert_eq!(q.len(), 1);
    }

    #[test]
    #[should_panic(expected = "scheduled in the past")]
    fn rejects_past_events() {
        let mut q = EventQueue::new();
        q.push_at(10, ());
        q.pop_until(u64::MAX);
        q.push_at(5, ());
    }
}
