use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::model::Tick;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum QueueError {
    #[error("event queue is empty")]
    EmptyQueue,
    #[error("event at t={at} precedes the clock (t={now})")]
    CausalityViolation { at: Tick, now: Tick },
}

struct Entry<E> {
    at: Tick,
    seq: u64,
    event: E,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

/// Discrete-event queue with a monotone virtual clock. Events at the same
/// time are dispatched in insertion order.
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<Entry<E>>>,
    next_seq: u64,
    clock: Tick,
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            clock: 0,
        }
    }

    pub fn now(&self) -> Tick {
        self.clock
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn peek_time(&self) -> Option<Tick> {
        self.heap.peek().map(|Reverse(e)| e.at)
    }

    pub fn push(&mut self, at: Tick, event: E) -> Result<(), QueueError> {
        if at < self.clock {
            return Err(QueueError::CausalityViolation { at, now: self.clock });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse(Entry { at, seq, event }));
        Ok(())
    }

    /// Pops the earliest event and advances the clock to its time.
    pub fn tick(&mut self) -> Result<(Tick, E), QueueError> {
        let Reverse(entry) = self.heap.pop().ok_or(QueueError::EmptyQueue)?;
        debug_assert!(entry.at >= self.clock);
        self.clock = entry.at;
        Ok((entry.at, entry.event))
    }

    /// Moves the clock forward without dispatching.
    pub fn advance_to(&mut self, t: Tick) {
        self.clock = self.clock.max(t);
    }
}
