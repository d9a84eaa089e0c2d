//! Point-to-point transport over a [`DelayMatrix`] with fail/recover.
//!
//! There is no transport-level retry. A message addressed to a failed replica
//! is dropped at send time, and a message that arrives after its target
//! failed is dropped at delivery (see [`Network::accepts`]).

use super::engine::{Engine, Target, TraceBytes};
use super::{DelayMatrix, ReplicaId, SimError, VirtualTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delivery {
    Scheduled(VirtualTime),
    Dropped,
}

#[derive(Debug, Clone)]
pub struct Network {
    delays: DelayMatrix,
    up: Vec<bool>,
    incarnation: Vec<u64>,
    dropped: u64,
}

impl Network {
    pub fn new(delays: DelayMatrix) -> Self {
        let n = delays.len();
        Self {
            delays,
            up: vec![true; n],
            incarnation: vec![0; n],
            dropped: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.up.len()
    }

    pub fn replicas(&self) -> impl Iterator<Item = ReplicaId> + '_ {
        (0..self.size()).map(ReplicaId::from_index)
    }

    pub fn delays(&self) -> &DelayMatrix {
        &self.delays
    }

    pub fn delay(&self, from: ReplicaId, to: ReplicaId) -> u64 {
        self.delays.get(from, to)
    }

    fn check(&self, r: ReplicaId) -> Result<(), SimError> {
        if r.index() < self.size() {
            Ok(())
        } else {
            Err(SimError::UnknownReplica(r))
        }
    }

    pub fn is_up(&self, r: ReplicaId) -> bool {
        self.up.get(r.index()).copied().unwrap_or(false)
    }

    /// Bumped on every failure; timers armed in an older incarnation are stale.
    pub fn incarnation(&self, r: ReplicaId) -> u64 {
        self.incarnation[r.index()]
    }

    pub fn active(&self) -> Vec<ReplicaId> {
        self.replicas().filter(|r| self.is_up(*r)).collect()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn fail(&mut self, r: ReplicaId) -> Result<(), SimError> {
        self.check(r)?;
        if self.up[r.index()] {
            self.up[r.index()] = false;
            self.incarnation[r.index()] += 1;
        }
        Ok(())
    }

    pub fn recover(&mut self, r: ReplicaId) -> Result<(), SimError> {
        self.check(r)?;
        self.up[r.index()] = true;
        Ok(())
    }

    /// Schedule delivery of `payload` at `now + delay(from, to)` unless `to` is down.
    pub fn send<P: TraceBytes>(
        &mut self,
        engine: &mut Engine<P>,
        from: ReplicaId,
        to: ReplicaId,
        payload: P,
    ) -> Result<Delivery, SimError> {
        self.check(from)?;
        self.check(to)?;
        if !self.up[to.index()] {
            self.dropped += 1;
            return Ok(Delivery::Dropped);
        }
        let at = engine.now() + self.delays.get(from, to);
        engine.schedule(at, Target::Replica(to), payload)?;
        Ok(Delivery::Scheduled(at))
    }

    /// Whether a delivery that reached `to` should be processed.
    pub fn accepts(&mut self, to: ReplicaId) -> bool {
        if self.is_up(to) {
            true
        } else {
            self.dropped += 1;
            false
        }
    }
}
