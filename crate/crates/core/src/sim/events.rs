//! Deterministic event queue: ordered by time, then kind rank, then
//! insertion sequence.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    RetrievalComplete,
    PrefillDone,
    TokenDone,
    KvTransferDone,
    PoolStepDone,
    BatchLaunch,
    Arrival,
    RetrievalDispatch,
    ControlTick,
}

impl EventKind {
    /// Tie-break rank for events at the same instant.
    pub fn rank(self) -> u8 {
        match self {
            EventKind::RetrievalComplete => 0,
            EventKind::PrefillDone
            | EventKind::TokenDone
            | EventKind::KvTransferDone
            | EventKind::PoolStepDone => 1,
            EventKind::BatchLaunch => 2,
            EventKind::Arrival | EventKind::RetrievalDispatch => 3,
            EventKind::ControlTick => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event<E> {
    pub t: f64,
    pub kind: EventKind,
    pub seq: u64,
    pub payload: E,
}

impl<E: PartialEq> Eq for Event<E> {}

impl<E: PartialEq> Ord for Event<E> {
    /// Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then(other.kind.rank().cmp(&self.kind.rank()))
            .then(other.seq.cmp(&self.seq))
    }
}

impl<E: PartialEq> PartialOrd for Event<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Event<E>>,
    next_seq: u64,
    now: f64,
}

impl<E: PartialEq> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: 0.0,
        }
    }
}

impl<E: PartialEq> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics when scheduling into the past: that would break causality.
    pub fn schedule(&mut self, t: f64, kind: EventKind, payload: E) -> u64 {
        assert!(
            t >= self.now && t.is_finite(),
            "event {kind:?} scheduled at {t} before current time {}",
            self.now
        );
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { t, kind, seq, payload });
        seq
    }

    pub fn pop(&mut self) -> Option<Event<E>> {
        let ev = self.heap.pop()?;
        self.now = ev.t;
        Some(ev)
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orders_by_time_rank_then_sequence() {
        let mut q = EventQueue::new();
        q.schedule(5.0, EventKind::ControlTick, 0);
        q.schedule(5.0, EventKind::Arrival, 1);
        q.schedule(5.0, EventKind::RetrievalComplete, 2);
        q.schedule(1.0, EventKind::ControlTick, 3);
        q.schedule(5.0, EventKind::Arrival, 4);
        q.schedule(5.0, EventKind::BatchLaunch, 5);
        q.schedule(5.0, EventKind::TokenDone, 6);
        let order: Vec<i32> = std::iter::from_fn(|| q.pop().map(|e| e.payload)).collect();
        assert_eq!(order, vec![3, 2, 6, 5, 1, 4, 0]);
    }

    #[test]
    #[should_panic(expected = "before current time")]
    fn rejects_past_events() {
        let mut q = EventQueue::new();
        q.schedule(2.0, EventKind::Arrival, ());
        q.pop();
        q.schedule(1.0, EventKind::Arrival, ());
    }
}
