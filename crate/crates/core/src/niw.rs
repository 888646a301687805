//! Deferred queue for non-interactive requests, released toward endpoints
//! that report spare capacity.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::types::{ModelId, SimTime, HOUR};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NiwConfig {
    /// Below this utilization an endpoint pulls one request per signal.
    pub sig_low: f64,
    /// Below this it pulls two.
    pub sig_lower: f64,
    pub escalate_after: SimTime,
    /// Force release once `deadline - now < margin × estimated service time`.
    pub force_margin: f64,
}

impl Default for NiwConfig {
    fn default() -> Self {
        Self {
            sig_low: 0.60,
            sig_lower: 0.50,
            escalate_after: 10 * HOUR,
            force_margin: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Deferred {
    pub req: u32,
    pub enqueue_ts: SimTime,
    pub deadline: SimTime,
    pub priority: u8,
    pub est_service: SimTime,
}

#[derive(Debug, Clone, Default)]
struct ModelQueue {
    fifo: VecDeque<Deferred>,
    /// Upper bound on `est_service` of anything ever queued.
    max_est: SimTime,
}

/// One FIFO per model.
#[derive(Debug, Clone)]
pub struct DeferredQueue {
    cfg: NiwConfig,
    queues: Vec<ModelQueue>,
    enqueued: u64,
    released: u64,
}

impl DeferredQueue {
    pub fn new(models: usize, cfg: NiwConfig) -> Self {
        Self {
            cfg,
            queues: vec![ModelQueue::default(); models],
            enqueued: 0,
            released: 0,
        }
    }

    pub fn config(&self) -> &NiwConfig {
        &self.cfg
    }

    pub fn enqueue(&mut self, model: ModelId, d: Deferred) {
        let q = &mut self.queues[model.index()];
        q.max_est = q.max_est.max(d.est_service);
        q.fifo.push_back(d);
        self.enqueued += 1;
    }

    pub fn len(&self, model: ModelId) -> usize {
        self.queues[model.index()].fifo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queues.iter().all(|q| q.fifo.is_empty())
    }

    pub fn totals(&self) -> (u64, u64) {
        (self.enqueued, self.released)
    }

    pub fn iter(&self, model: ModelId) -> impl Iterator<Item = &Deferred> {
        self.queues[model.index()].fifo.iter()
    }

    /// Requests to release toward an endpoint reporting `utilization`.
    pub fn on_capacity_signal(&mut self, model: ModelId, utilization: f64) -> Vec<Deferred> {
        let n = if utilization < self.cfg.sig_lower {
            2
        } else if utilization < self.cfg.sig_low {
            1
        } else {
            0
        };
        let q = &mut self.queues[model.index()].fifo;
        let out: Vec<Deferred> = (0..n).map_while(|_| q.pop_front()).collect();
        self.released += out.len() as u64;
        out
    }

    /// Promotes requests queued longer than the escalation age to priority 0.
    pub fn escalate(&mut self, now: SimTime) -> u64 {
        let age = self.cfg.escalate_after;
        let mut n = 0;
        for q in &mut self.queues {
            for d in q.fifo.iter_mut() {
                if now.saturating_sub(d.enqueue_ts) <= age {
                    break;
                }
                if d.priority != 0 {
                    d.priority = 0;
                    n += 1;
                }
            }
        }
        n
    }

    /// Removes requests that would miss their deadline if they waited longer.
    pub fn due_for_release(&mut self, now: SimTime) -> Vec<(ModelId, Deferred)> {
        let margin = self.cfg.force_margin;
        let urgent =
            |d: &Deferred, est: SimTime| (d.deadline as f64 - now as f64) < margin * est as f64;
        let mut out = Vec::new();
        for (m, q) in self.queues.iter_mut().enumerate() {
            // Deadlines follow FIFO order, so only a prefix can be urgent.
            let prefix = q.fifo.iter().take_while(|d| urgent(d, q.max_est)).count();
            if prefix == 0 {
                continue;
            }
            let mut kept = VecDeque::with_capacity(q.fifo.len());
            for (i, d) in q.fifo.drain(..).enumerate() {
                if i < prefix && urgent(&d, d.est_service) {
                    out.push((ModelId(m as u16), d));
                } else {
                    kept.push_back(d);
                }
            }
            q.fifo = kept;
        }
        self.released += out.len() as u64;
        out
    }

    pub fn drain_all(&mut self) -> Vec<(ModelId, Deferred)> {
        let mut out = Vec::new();
        for (m, q) in self.queues.iter_mut().enumerate() {
            out.extend(q.fifo.drain(..).map(|d| (ModelId(m as u16), d)));
        }
        self.released += out.len() as u64;
        out
    }
}
