//! Event queue ordered by `(fire_at, seq)`.
//!
//! The engine owns the virtual clock. Popping an event advances the clock to
//! the event's fire time; nothing else moves it.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use sha2::{Digest, Sha256};

use super::{ReplicaId, SimError, VirtualTime};

/// Who an event is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Target {
    Replica(ReplicaId),
    /// The run driver itself (workload arrivals, fault injection).
    Driver,
}

#[derive(Debug, Clone)]
pub struct Event<P> {
    pub fire_at: VirtualTime,
    pub seq: u64,
    pub target: Target,
    pub payload: P,
}

struct Queued<P>(Event<P>);

impl<P> PartialEq for Queued<P> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<P> Eq for Queued<P> {}

impl<P> PartialOrd for Queued<P> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<P> Ord for Queued<P> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key().cmp(&other.key())
    }
}

impl<P> Queued<P> {
    fn key(&self) -> (VirtualTime, u64) {
        (self.0.fire_at, self.0.seq)
    }
}

/// Anything that can contribute bytes to the run's trace fingerprint.
pub trait TraceBytes {
    fn trace_bytes(&self, out: &mut Vec<u8>);
}

pub struct Engine<P> {
    now: VirtualTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Queued<P>>>,
    processed: u64,
    trace: Sha256,
    scratch: Vec<u8>,
}

impl<P: TraceBytes> Engine<P> {
    pub fn new() -> Self {
        Self {
            now: VirtualTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            processed: 0,
            trace: Sha256::new(),
            scratch: Vec::with_capacity(256),
        }
    }

    pub fn now(&self) -> VirtualTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn peek_time(&self) -> Option<VirtualTime> {
        self.queue.peek().map(|Reverse(q)| q.0.fire_at)
    }

    /// Enqueue `payload` for `target` at `fire_at`. Returns the assigned sequence number.
    pub fn schedule(
        &mut self,
        fire_at: VirtualTime,
        target: Target,
        payload: P,
    ) -> Result<u64, SimError> {
        if fire_at < self.now {
            return Err(SimError::ScheduleInPast {
                at: fire_at,
                now: self.now,
            });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Queued(Event {
            fire_at,
            seq,
            target,
            payload,
        })));
        Ok(seq)
    }

    pub fn schedule_after(&mut self, delay_us: u64, target: Target, payload: P) -> u64 {
        let at = self.now + delay_us;
        self.schedule(at, target, payload)
            .expect("relative schedule is never in the past")
    }

    /// Remove the next event and advance the clock to it.
    pub fn pop(&mut self) -> Option<Event<P>> {
        let Reverse(Queued(ev)) = self.queue.pop()?;
        debug_assert!(ev.fire_at >= self.now);
        self.now = ev.fire_at;
        self.processed += 1;

        self.scratch.clear();
        self.scratch.extend_from_slice(&ev.fire_at.0.to_le_bytes());
        self.scratch.extend_from_slice(&ev.seq.to_le_bytes());
        match ev.target {
            Target::Replica(r) => self
                .scratch
                .extend_from_slice(&[0, r.0 as u8, (r.0 >> 8) as u8]),
            Target::Driver => self.scratch.extend_from_slice(&[1, 0, 0]),
        }
        ev.payload.trace_bytes(&mut self.scratch);
        self.trace.update(&self.scratch);
        Some(ev)
    }

    /// Hex digest over every event processed so far.
    pub fn trace_hash(&self) -> String {
        hex::encode(self.trace.clone().finalize())
    }
}

impl<P: TraceBytes> Default for Engine<P> {
    fn default() -> Self {
        Self::new()
    }
}
