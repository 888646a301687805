use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::sim::Pool;
use crate::types::{InstanceId, RegionId, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    /// Next record of the trace reaches its client region.
    RequestArrival {
        req: u32,
    },
    /// A request reaches the serving endpoint after any inter-region hop.
    RequestLanded {
        req: u32,
        region: RegionId,
        pool: Pool,
    },
    /// Fine mode: one iteration finished. Also marks the end of a prefill.
    TokenEmitted {
        inst: InstanceId,
        epoch: u64,
    },
    /// Coarse mode: a decode run finished.
    BatchComplete {
        inst: InstanceId,
        epoch: u64,
    },
    ProvisioningDone {
        inst: InstanceId,
    },
    /// Private-to-spot role switch finished.
    SpotSwitchDone {
        inst: InstanceId,
    },
    /// Control-plane timer.
    ScalerTick {
        tag: u64,
    },
    ForecastTick,
    UtilizationSample,
    TraceEnd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub fire_ts: SimTime,
    pub seq: u64,
    pub kind: EventKind,
}

impl EventKind {
    /// Phase ends fire before anything else due at the same millisecond, so
    /// a request landing on an iteration boundary waits for the next one in
    /// both decode modes.
    fn class(&self) -> u8 {
        match self {
            EventKind::TokenEmitted { .. } | EventKind::BatchComplete { .. } => 0,
            _ => 1,
        }
    }
}

impl Event {
    fn key(&self) -> (SimTime, u8, u64) {
        (self.fire_ts, self.kind.class(), self.seq)
    }
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap.
        other.key().cmp(&self.key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Pending events, popped in `(fire_ts, class, seq)` order.
#[derive(Debug, Default)]
pub struct EventQueue {
    heap: BinaryHeap<Event>,
    next_seq: u64,
}

impl EventQueue {
    pub fn push(&mut self, fire_ts: SimTime, kind: EventKind) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Event { fire_ts, seq, kind });
        seq
    }

    pub fn pop(&mut self) -> Option<Event> {
        self.heap.pop()
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
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn pops_in_time_class_then_sequence_order(times in prop::collection::vec(0u64..50, 1..200)) {
            let mut q = EventQueue::default();
            for &t in &times {
                q.push(t, EventKind::ForecastTick);
            }
            q.push(25, EventKind::BatchComplete { inst: InstanceId(0), epoch: 0 });
            let mut last = None;
            while let Some(e) = q.pop() {
                prop_assert!(last.is_none_or(|l| e.key() > l));
                if matches!(e.kind, EventKind::BatchComplete { .. }) {
                    prop_assert!(last.is_none_or(|l: (SimTime, u8, u64)| l.0 < 25));
                }
                last = Some(e.key());
            }
        }
    }
}
