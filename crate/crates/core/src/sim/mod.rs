//! Single-threaded discrete-event kernel.
//!
//! Events are ordered by `(fire_time_us, sequence)`. The caller pulls events
//! one at a time and reacts to them, which keeps protocol state outside the
//! engine and lets several protocols share one event loop.

mod latency;
mod ledger;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use latency::{LatencyError, LatencyModel};
pub use ledger::{ClassCounters, MessageClass, TrafficCounters, TrafficLedger};

/// Simulator address of a node.
pub type NodeIdx = u32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(NodeIdx),
    #[error("node {0} cannot send to itself")]
    SelfSend(NodeIdx),
    #[error("cannot schedule at {at_us} us, clock is at {now_us} us")]
    InPast { at_us: u64, now_us: u64 },
    #[error("engine already finalized")]
    Finalized,
    #[error(transparent)]
    Latency(#[from] LatencyError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind<M> {
    MessageDelivery {
        from: NodeIdx,
        to: NodeIdx,
        bytes: u64,
        class: MessageClass,
        message: M,
    },
    TimerExpiry {
        node: NodeIdx,
        token: M,
    },
    SlotBoundary {
        slot: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<M> {
    pub fire_time_us: u64,
    pub sequence: u64,
    pub kind: EventKind<M>,
}

struct Queued<M>(SimEvent<M>);

impl<M> Queued<M> {
    fn key(&self) -> (u64, u64) {
        (self.0.fire_time_us, self.0.sequence)
    }
}

impl<M> PartialEq for Queued<M> {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl<M> Eq for Queued<M> {}

impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Queued<M> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

/// Link rates in bytes per second; `None` is unlimited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthBudget {
    pub uplink_bytes_per_sec: Option<u64>,
    pub downlink_bytes_per_sec: Option<u64>,
}

impl BandwidthBudget {
    pub const UNLIMITED: BandwidthBudget = BandwidthBudget {
        uplink_bytes_per_sec: None,
        downlink_bytes_per_sec: None,
    };

    pub fn uplink(bytes_per_sec: u64) -> Self {
        BandwidthBudget {
            uplink_bytes_per_sec: Some(bytes_per_sec),
            downlink_bytes_per_sec: None,
        }
    }
}

/// Microseconds needed to push `bytes` through a link of `rate` bytes/s.
pub fn serialization_us(bytes: u64, rate: Option<u64>) -> u64 {
    match rate {
        None => 0,
        Some(0) => u64::MAX / 4,
        Some(r) => ((bytes as u128 * 1_000_000).div_ceil(r as u128)) as u64,
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_fold(mut h: u64, words: &[u64]) -> u64 {
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

pub struct Simulator<M> {
    now_us: u64,
    next_seq: u64,
    queue: BinaryHeap<Queued<M>>,
    latency: LatencyModel,
    seed: u64,
    bandwidth: Vec<BandwidthBudget>,
    uplink_free_at: Vec<u64>,
    downlink_free_at: Vec<u64>,
    ledger: TrafficLedger,
    trace: u64,
    processed: u64,
    scheduled: u64,
    finalized: bool,
}

impl<M> Simulator<M> {
    pub fn new(node_count: usize, latency: LatencyModel, seed: u64) -> Result<Self, SimError> {
        latency.validate()?;
        Ok(Simulator {
            now_us: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            latency,
            seed,
            bandwidth: vec![BandwidthBudget::UNLIMITED; node_count],
            uplink_free_at: vec![0; node_count],
            downlink_free_at: vec![0; node_count],
            ledger: TrafficLedger::new(node_count),
            trace: FNV_OFFSET,
            processed: 0,
            scheduled: 0,
            finalized: false,
        })
    }

    pub fn node_count(&self) -> usize {
        self.bandwidth.len()
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn latency_model(&self) -> &LatencyModel {
        &self.latency
    }

    pub fn link_latency_us(&self, a: NodeIdx, b: NodeIdx) -> u64 {
        self.latency.latency_us(self.seed, a, b)
    }

    pub fn set_bandwidth(&mut self, node: NodeIdx, budget: BandwidthBudget) -> Result<(), SimError> {
        self.check_node(node)?;
        self.bandwidth[node as usize] = budget;
        Ok(())
    }

    pub fn ledger(&self) -> &TrafficLedger {
        &self.ledger
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn scheduled(&self) -> u64 {
        self.scheduled
    }

    /// FNV-1a hash over every processed event's timing and routing fields.
    pub fn trace_hash(&self) -> u64 {
        self.trace
    }

    fn check_node(&self, node: NodeIdx) -> Result<(), SimError> {
        if (node as usize) < self.bandwidth.len() {
            Ok(())
        } else {
            Err(SimError::UnknownNode(node))
        }
    }

    fn check_open(&self) -> Result<(), SimError> {
        if self.finalized {
            Err(SimError::Finalized)
        } else {
            Ok(())
        }
    }

    /// Queues an event. A `MessageDelivery` scheduled this way is recorded as
    /// sent at the time of the call, bypassing bandwidth and latency.
    pub fn schedule(&mut self, fire_time_us: u64, kind: EventKind<M>) -> Result<u64, SimError> {
        self.check_open()?;
        if fire_time_us < self.now_us {
            return Err(SimError::InPast {
                at_us: fire_time_us,
                now_us: self.now_us,
            });
        }
        match &kind {
            EventKind::MessageDelivery {
                from, to, bytes, class, ..
            } => {
                self.check_node(*from)?;
                self.check_node(*to)?;
                self.ledger.record_send(*from, *bytes, *class);
            }
            EventKind::TimerExpiry { node, .. } => self.check_node(*node)?,
            EventKind::SlotBoundary { .. } => {}
        }
        let sequence = self.next_seq;
        self.next_seq += 1;
        self.scheduled += 1;
        self.queue.push(Queued(SimEvent {
            fire_time_us,
            sequence,
            kind,
        }));
        Ok(sequence)
    }

    /// Sends a message now; returns the delivery time.
    pub fn send(&mut self, from: NodeIdx, to: NodeIdx, bytes: u64, class: MessageClass, message: M) -> Result<u64, SimError> {
        self.send_delayed(from, to, bytes, class, message, 0)
    }

    /// Like [`send`](Self::send) with `extra_us` added to propagation.
    pub fn send_delayed(
        &mut self,
        from: NodeIdx,
        to: NodeIdx,
        bytes: u64,
        class: MessageClass,
        message: M,
        extra_us: u64,
    ) -> Result<u64, SimError> {
        self.check_open()?;
        self.check_node(from)?;
        self.check_node(to)?;
        if from == to {
            return Err(SimError::SelfSend(from));
        }
        let (f, t) = (from as usize, to as usize);
        let tx_done = self.uplink_free_at[f].max(self.now_us)
            + serialization_us(bytes, self.bandwidth[f].uplink_bytes_per_sec);
        if self.bandwidth[f].uplink_bytes_per_sec.is_some() {
            self.uplink_free_at[f] = tx_done;
        }
        let arrival = tx_done + self.link_latency_us(from, to) + extra_us;
        let deliver = match self.bandwidth[t].downlink_bytes_per_sec {
            None => arrival,
            rate => {
                let done = arrival.max(self.downlink_free_at[t]) + serialization_us(bytes, rate);
                self.downlink_free_at[t] = done;
                done
            }
        };
        self.schedule(
            deliver,
            EventKind::MessageDelivery {
                from,
                to,
                bytes,
                class,
                message,
            },
        )?;
        Ok(deliver)
    }

    /// Records a message as sent and dropped; nothing is delivered.
    pub fn drop_message(&mut self, from: NodeIdx, to: NodeIdx, bytes: u64, class: MessageClass) -> Result<(), SimError> {
        self.check_open()?;
        self.check_node(from)?;
        self.check_node(to)?;
        self.ledger.record_send(from, bytes, class);
        self.ledger.record_drop(from, bytes, class);
        Ok(())
    }

    pub fn schedule_timer(&mut self, node: NodeIdx, at_us: u64, token: M) -> Result<u64, SimError> {
        self.schedule(at_us, EventKind::TimerExpiry { node, token })
    }

    pub fn schedule_after(&mut self, node: NodeIdx, delay_us: u64, token: M) -> Result<u64, SimError> {
        self.schedule_timer(node, self.now_us + delay_us, token)
    }

    pub fn schedule_slot_boundary(&mut self, at_us: u64, slot: u64) -> Result<u64, SimError> {
        self.schedule(at_us, EventKind::SlotBoundary { slot })
    }

    pub fn next_event(&mut self) -> Option<SimEvent<M>> {
        self.next_event_until(u64::MAX)
    }

    /// Pops the next event if it fires at or before `limit_us`.
    pub fn next_event_until(&mut self, limit_us: u64) -> Option<SimEvent<M>> {
        if self.queue.peek()?.0.fire_time_us > limit_us {
            return None;
        }
        let Queued(ev) = self.queue.pop()?;
        debug_assert!(ev.fire_time_us >= self.now_us);
        self.now_us = ev.fire_time_us;
        self.processed += 1;
        let words = match &ev.kind {
            EventKind::MessageDelivery {
                from, to, bytes, class, ..
            } => {
                self.ledger.record_receive(*to, *bytes, *class);
                [0, *from as u64, *to as u64, *bytes, *class as u64]
            }
            EventKind::TimerExpiry { node, .. } => [1, *node as u64, 0, 0, 0],
            EventKind::SlotBoundary { slot } => [2, *slot, 0, 0, 0],
        };
        self.trace = fnv_fold(self.trace, &[ev.fire_time_us, ev.sequence]);
        self.trace = fnv_fold(self.trace, &words);
        Some(ev)
    }

    /// Feeds events to `handler` until the queue is empty or the next event
    /// lies beyond `limit_us`. Returns the number of events handled.
    pub fn run_until<F>(&mut self, limit_us: Option<u64>, mut handler: F) -> u64
    where
        F: FnMut(&mut Self, SimEvent<M>),
    {
        let mut n = 0;
        while let Some(ev) = self.next_event_until(limit_us.unwrap_or(u64::MAX)) {
            handler(self, ev);
            n += 1;
        }
        n
    }

    /// Closes the engine and returns the final ledger. Undelivered messages
    /// still in the queue are counted as dropped.
    pub fn finalize(&mut self) -> TrafficLedger {
        self.finalized = true;
        for Queued(ev) in std::mem::take(&mut self.queue).into_vec() {
            if let EventKind::MessageDelivery { from, bytes, class, .. } = ev.kind {
                self.ledger.record_drop(from, bytes, class);
            }
        }
        self.ledger.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DeterministicRng;
    use rand::Rng;

    fn constant(us: u64, n: usize) -> Simulator<u32> {
        Simulator::new(n, LatencyModel::Constant { us }, 0).unwrap()
    }

    #[test]
    fn equal_times_fire_in_insertion_order() {
        let mut sim = constant(0, 1);
        for i in 0..10 {
            sim.schedule_timer(0, 5, i).unwrap();
        }
        let mut got = vec![];
        sim.run_until(None, |_, ev| {
            if let EventKind::TimerExpiry { token, .. } = ev.kind {
                got.push(token)
            }
        });
        assert_eq!(got, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn empty_queue_returns_immediately() {
        let mut sim = constant(0, 1);
        assert_eq!(sim.run_until(None, |_, _| {}), 0);
        assert_eq!(sim.now_us(), 0);
    }

    #[test]
    fn million_random_events_all_processed_in_order() {
        let mut sim = constant(0, 4);
        let mut rng = DeterministicRng::new(1, 0);
        for _ in 0..1_000_000 {
            sim.schedule_timer(rng.gen_range(0..4), rng.gen_range(0..1_000_000), 0).unwrap();
        }
        let mut last = (0, 0);
        let n = sim.run_until(None, |_, ev| {
            assert!((ev.fire_time_us, ev.sequence) > last || last == (0, 0));
            last = (ev.fire_time_us, ev.sequence);
        });
        assert_eq!(n, 1_000_000);
        assert_eq!(sim.processed(), sim.scheduled());
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut sim = constant(0, 1);
        sim.schedule_timer(0, 100, 0).unwrap();
        sim.next_event();
        assert_eq!(
            sim.schedule_timer(0, 99, 0),
            Err(SimError::InPast { at_us: 99, now_us: 100 })
        );
    }

    #[test]
    fn send_errors() {
        let mut sim = constant(1, 2);
        assert_eq!(sim.send(0, 2, 1, MessageClass::Signaling, 0), Err(SimError::UnknownNode(2)));
        assert_eq!(sim.send(1, 1, 1, MessageClass::Signaling, 0), Err(SimError::SelfSend(1)));
    }

    #[test]
    fn constant_latency_cell_delivery() {
        let mut sim = constant(100_000, 2);
        let t = sim.send(0, 1, 560, MessageClass::CellTransfer, 7).unwrap();
        assert_eq!(t, 100_000);
        let ev = sim.next_event().unwrap();
        assert_eq!(ev.fire_time_us, 100_000);
        assert_eq!(sim.ledger().node(1).class(MessageClass::CellTransfer).bytes_received, 560);
    }

    #[test]
    fn uplink_serialization_delay() {
        let mut sim = constant(0, 2);
        sim.set_bandwidth(0, BandwidthBudget::uplink(1_000_000)).unwrap();
        let t = sim.send(0, 1, 1_144_640, MessageClass::CellTransfer, 0).unwrap();
        assert_eq!(t, 1_144_640);
        // the second message queues behind the first on the uplink
        let t2 = sim.send(0, 1, 1_000, MessageClass::CellTransfer, 0).unwrap();
        assert_eq!(t2, 1_145_640);
    }

    #[test]
    fn downlink_serialization_queues() {
        let mut sim = constant(10, 3);
        sim.set_bandwidth(
            2,
            BandwidthBudget {
                uplink_bytes_per_sec: None,
                downlink_bytes_per_sec: Some(1_000),
            },
        )
        .unwrap();
        assert_eq!(sim.send(0, 2, 1, MessageClass::Signaling, 0).unwrap(), 1_010);
        assert_eq!(sim.send(1, 2, 1, MessageClass::Signaling, 0).unwrap(), 2_010);
    }

    #[test]
    fn drops_are_ledgered_and_conserved() {
        let mut sim = constant(5, 3);
        sim.send(0, 1, 100, MessageClass::CellTransfer, 0).unwrap();
        sim.drop_message(0, 2, 50, MessageClass::CellTransfer).unwrap();
        sim.send(2, 1, 10, MessageClass::Header, 0).unwrap();
        assert_eq!(sim.run_until(None, |_, _| {}), 2);
        let l = sim.ledger();
        assert_eq!(l.global().bytes_sent(), 160);
        assert_eq!(l.global().bytes_received(), 110);
        assert_eq!(l.global().bytes_dropped(), 50);
        assert_eq!(l.node(0).class(MessageClass::CellTransfer).messages_dropped, 1);
        assert!(l.is_conserved());
    }

    #[test]
    fn finalize_counts_undelivered_as_dropped() {
        let mut sim = constant(5, 2);
        sim.send(0, 1, 100, MessageClass::Signaling, 0).unwrap();
        let ledger = sim.finalize();
        assert!(ledger.is_conserved());
        assert_eq!(ledger.global().bytes_dropped(), 100);
        assert_eq!(sim.send(0, 1, 1, MessageClass::Signaling, 0), Err(SimError::Finalized));
    }

    fn random_run(seed: u64) -> (u64, TrafficLedger) {
        let mut sim: Simulator<u32> = Simulator::new(20, LatencyModel::default(), seed).unwrap();
        let mut rng = DeterministicRng::new(seed, 0);
        for _ in 0..100 {
            let a = rng.gen_range(0..20);
            let b = (a + rng.gen_range(1..20)) % 20;
            sim.send(a, b, rng.gen_range(1..1000), MessageClass::CellTransfer, 3).unwrap();
        }
        sim.run_until(None, |s, ev| {
            if let EventKind::MessageDelivery { to, message, .. } = ev.kind {
                if message > 0 {
                    let next = (to + 1) % 20;
                    s.send(to, next, 64, MessageClass::Signaling, message - 1).unwrap();
                }
            }
        });
        (sim.trace_hash(), sim.finalize())
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let (h1, l1) = random_run(11);
        let (h2, l2) = random_run(11);
        let (h3, _) = random_run(12);
        assert_eq!(h1, h2);
        assert_eq!(l1, l2);
        assert_ne!(h1, h3);
        assert!(l1.is_conserved());
    }
}
