//! One model instance: local queue, running batch, KV accounting and the
//! iteration-level execution state machine.

use crate::perf::PairProfile;
use crate::routing::{order_queue, QueueKey, SchedulerConfig};
use crate::sim::{Pool, Role};
use crate::types::{GpuId, InstanceId, ModelId, RegionId, SimTime};

/// KV-cache bytes held by a request with `generated` output tokens so far.
pub fn kv_footprint(input_tokens: u32, generated: u32, kv_bytes_per_token: u64) -> u64 {
    (input_tokens as u64 + generated as u64) * kv_bytes_per_token
}

/// A request inside the running batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub idx: u32,
    pub input: u32,
    pub output: u32,
    /// Output tokens generated as of the start of the current phase.
    pub generated: u32,
}

impl Slot {
    fn reservation(&self) -> u64 {
        self.input as u64 + self.output as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Phase {
    Idle,
    /// Slots `from..` are being prefilled; earlier slots are paused.
    Prefill {
        end: SimTime,
        from: usize,
    },
    /// Absolute end time of each iteration in the current run.
    Decode {
        ends: Vec<SimTime>,
    },
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub id: InstanceId,
    pub model: ModelId,
    pub gpu: GpuId,
    pub region: RegionId,
    pub pool: Pool,
    pub role: Role,
    pub capacity_tokens: u64,
    pub queue: Vec<QueueKey>,
    /// Σ (input + output) over queued requests.
    pub queued_tokens: u64,
    pub running: Vec<Slot>,
    /// Σ (input + output) over running requests; bounded by capacity.
    pub reserved_tokens: u64,
    /// Σ (input + generated) over running requests as of the phase start.
    pub used_tokens: u64,
    pub phase: Phase,
    /// Bumped whenever a scheduled phase-end event is invalidated.
    pub epoch: u64,
    pub provisioning_done_ts: Option<SimTime>,
}

/// Outcome of ending a phase.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct PhaseEnd {
    pub first_token: Vec<u32>,
    pub completed: Vec<u32>,
}

fn iteration_ms(ms: f64) -> SimTime {
    (ms.round() as SimTime).max(1)
}

impl Instance {
    pub fn new(
        id: InstanceId,
        model: ModelId,
        gpu: GpuId,
        region: RegionId,
        pool: Pool,
        role: Role,
        capacity_tokens: u64,
    ) -> Self {
        Self {
            id,
            model,
            gpu,
            region,
            pool,
            role,
            capacity_tokens,
            queue: Vec::new(),
            queued_tokens: 0,
            running: Vec::new(),
            reserved_tokens: 0,
            used_tokens: 0,
            phase: Phase::Idle,
            epoch: 0,
            provisioning_done_ts: None,
        }
    }

    pub fn is_idle(&self) -> bool {
        self.phase == Phase::Idle && self.running.is_empty() && self.queue.is_empty()
    }

    /// Decode iterations finished by `now` within the current run.
    pub fn done_iterations(&self, now: SimTime) -> usize {
        match &self.phase {
            Phase::Decode { ends } => ends.partition_point(|&e| e <= now),
            _ => 0,
        }
    }

    pub fn used_tokens_at(&self, now: SimTime) -> u64 {
        self.used_tokens + (self.running.len() * self.done_iterations(now)) as u64
    }

    /// JSQ load: queued input+output, prefilling input+output, and unfinished
    /// output of decoding requests.
    pub fn remaining_tokens(&self, now: SimTime) -> u64 {
        let from = match self.phase {
            Phase::Prefill { from, .. } => from,
            _ => self.running.len(),
        };
        let decoding: u64 = self.running[..from]
            .iter()
            .map(|s| (s.output - s.generated) as u64)
            .sum();
        let prefilling: u64 = self.running[from..].iter().map(Slot::reservation).sum();
        self.queued_tokens + prefilling + decoding - (from * self.done_iterations(now)) as u64
    }

    pub fn enqueue(&mut self, key: QueueKey) {
        self.queued_tokens += key.input_tokens as u64 + key.output_tokens as u64;
        self.queue.push(key);
    }

    /// Removes and returns the whole local queue.
    pub fn take_queue(&mut self) -> Vec<QueueKey> {
        self.queued_tokens = 0;
        std::mem::take(&mut self.queue)
    }

    fn fits(&self, k: &QueueKey) -> bool {
        self.reserved_tokens + k.input_tokens as u64 + k.output_tokens as u64
            <= self.capacity_tokens
    }

    /// Whether an admission attempt would admit anything now.
    pub fn can_admit(&self) -> bool {
        (self.running.is_empty() && !self.queue.is_empty())
            || self.queue.iter().any(|k| self.fits(k))
    }

    /// A queued request would fit but waits behind a head that does not.
    pub fn blocked_fit(&self) -> bool {
        self.queue.iter().any(|k| self.fits(k))
    }

    /// Admits queued requests in policy order until the first whose
    /// reservation does not fit. An empty instance always takes its head
    /// request even if oversize. Returns the number admitted and whether one
    /// was oversize.
    pub fn admit(&mut self, now: SimTime, sched: &SchedulerConfig) -> (usize, bool) {
        if self.queue.is_empty() {
            return (0, false);
        }
        order_queue(&mut self.queue, now, sched);
        let mut oversize = false;
        let mut keep = Vec::with_capacity(self.queue.len());
        let mut admitted = 0;
        let mut blocked = false;
        for k in std::mem::take(&mut self.queue) {
            let alone = self.running.is_empty() && admitted == 0 && !oversize;
            if !blocked && (self.fits(&k) || alone) {
                if !self.fits(&k) {
                    oversize = true;
                }
                let slot = Slot {
                    idx: k.idx,
                    input: k.input_tokens,
                    output: k.output_tokens,
                    generated: 0,
                };
                self.reserved_tokens += slot.reservation();
                self.used_tokens += slot.input as u64;
                self.queued_tokens -= slot.reservation();
                self.running.push(slot);
                admitted += 1;
            } else {
                blocked = true;
                keep.push(k);
            }
        }
        self.queue = keep;
        (admitted, oversize)
    }

    /// Starts a prefill for slots `from..`. Returns (end, extrapolated).
    pub fn start_prefill(
        &mut self,
        now: SimTime,
        from: usize,
        profile: &PairProfile,
    ) -> (SimTime, bool) {
        let tokens: u64 = self.running[from..].iter().map(|s| s.input as u64).sum();
        let l = profile.prefill(tokens as f64);
        let end = now + iteration_ms(l.ms);
        self.phase = Phase::Prefill { end, from };
        self.epoch += 1;
        (end, l.extrapolated)
    }

    /// Starts a decode run lasting until the next completion, or a single
    /// iteration when `single` is set. Returns (run end, extrapolated lookups).
    pub fn start_decode(
        &mut self,
        now: SimTime,
        profile: &PairProfile,
        single: bool,
    ) -> (SimTime, u64) {
        let b = self.running.len();
        debug_assert!(b > 0);
        let k = if single {
            1
        } else {
            self.running
                .iter()
                .map(|s| s.output - s.generated)
                .min()
                .unwrap_or(1)
                .max(1)
        };
        let mut ends = Vec::with_capacity(k as usize);
        let mut t = now;
        let mut extrapolated = 0;
        for j in 0..k as u64 {
            let l = profile.decode(b as f64, (self.used_tokens + j * b as u64) as f64);
            extrapolated += u64::from(l.extrapolated);
            t += iteration_ms(l.ms);
            ends.push(t);
        }
        self.phase = Phase::Decode { ends };
        self.epoch += 1;
        (t, extrapolated)
    }

    /// Cuts the current decode run at the end of the iteration in progress so
    /// newly queued work can be admitted. Returns the new end if it changed.
    pub fn truncate_run(&mut self, now: SimTime) -> Option<SimTime> {
        let done = self.done_iterations(now);
        let Phase::Decode { ends } = &mut self.phase else {
            return None;
        };
        if done + 1 >= ends.len() {
            return None;
        }
        ends.truncate(done + 1);
        self.epoch += 1;
        ends.last().copied()
    }

    fn retire_finished(&mut self, out: &mut PhaseEnd) {
        let mut i = 0;
        while i < self.running.len() {
            let s = self.running[i];
            if s.generated >= s.output {
                self.reserved_tokens -= s.reservation();
                self.used_tokens -= s.input as u64 + s.generated as u64;
                out.completed.push(s.idx);
                self.running.remove(i);
            } else {
                i += 1;
            }
        }
    }

    /// Ends the prefill: each prefilled request emits its first token.
    pub fn finish_prefill(&mut self) -> PhaseEnd {
        let Phase::Prefill { from, .. } = self.phase else {
            panic!("finish_prefill outside prefill");
        };
        let mut out = PhaseEnd::default();
        for s in &mut self.running[from..] {
            s.generated = 1;
            self.used_tokens += 1;
            out.first_token.push(s.idx);
        }
        self.phase = Phase::Idle;
        self.retire_finished(&mut out);
        out
    }

    /// Ends the decode run, materializing every iteration in it.
    pub fn finish_decode(&mut self) -> PhaseEnd {
        let Phase::Decode { ends } = &self.phase else {
            panic!("finish_decode outside decode");
        };
        let j = ends.len() as u32;
        for s in &mut self.running {
            s.generated += j;
        }
        self.used_tokens += self.running.len() as u64 * j as u64;
        self.phase = Phase::Idle;
        let mut out = PhaseEnd::default();
        self.retire_finished(&mut out);
        out
    }

    /// Σ (input + generated) over the batch at `now`, recomputed from slots.
    pub fn recomputed_used_tokens(&self, now: SimTime) -> u64 {
        let done = self.done_iterations(now) as u64;
        self.running
            .iter()
            .map(|s| s.input as u64 + s.generated as u64 + done)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Tier;

    fn inst(cap: u64) -> Instance {
        Instance::new(
            InstanceId(0),
            ModelId(0),
            GpuId(0),
            RegionId(0),
            Pool::Shared,
            Role::Private,
            cap,
        )
    }

    fn key(idx: u32, arrival: SimTime, input: u32, output: u32) -> QueueKey {
        QueueKey {
            idx,
            arrival_ts: arrival,
            tier: Tier::IwFast,
            priority: 0,
            deadline: arrival + 1_000,
            input_tokens: input,
            output_tokens: output,
        }
    }

    #[test]
    fn footprint_is_linear() {
        assert_eq!(kv_footprint(1_000, 0, 500_000), 500_000_000);
        assert!(kv_footprint(1_000, 1, 500_000) > kv_footprint(1_000, 0, 500_000));
    }

    #[test]
    fn empty_queue_admits_nothing() {
        let mut i = inst(1_000);
        assert_eq!(i.admit(0, &SchedulerConfig::default()), (0, false));
    }

    #[test]
    fn three_small_requests_all_admitted_in_order() {
        let mut i = inst(1_000);
        for (n, a) in [(0, 5), (1, 1), (2, 3)] {
            i.enqueue(key(n, a, 100, 50));
        }
        assert_eq!(i.admit(10, &SchedulerConfig::default()), (3, false));
        let order: Vec<u32> = i.running.iter().map(|s| s.idx).collect();
        assert_eq!(order, vec![1, 2, 0]);
        assert_eq!(i.queued_tokens, 0);
        assert_eq!(i.used_tokens, 300);
    }

    #[test]
    fn large_head_blocks_smaller_request() {
        let mut i = inst(1_000);
        i.running.push(Slot {
            idx: 9,
            input: 150,
            output: 50,
            generated: 0,
        });
        i.reserved_tokens = 200;
        i.used_tokens = 150;
        i.enqueue(key(0, 0, 800, 100));
        i.enqueue(key(1, 1, 40, 10));
        assert_eq!(i.admit(5, &SchedulerConfig::default()), (0, false));
        assert_eq!(i.queue.len(), 2);
        assert!(i.blocked_fit());
    }

    #[test]
    fn oversize_request_runs_alone() {
        let mut i = inst(100);
        i.enqueue(key(0, 0, 500, 10));
        i.enqueue(key(1, 1, 10, 10));
        assert_eq!(i.admit(0, &SchedulerConfig::default()), (1, true));
        assert_eq!(i.running.len(), 1);
        assert!(!i.can_admit());
    }

    #[test]
    fn prefill_then_decode_releases_memory_at_completion() {
        let p = PairProfile::analytic(1_000.0, 10.0);
        let mut i = inst(10_000);
        i.enqueue(key(0, 0, 100, 3));
        i.enqueue(key(1, 0, 200, 5));
        i.admit(0, &SchedulerConfig::default());
        let (end, _) = i.start_prefill(0, 0, &p);
        assert_eq!(end, 300);
        let out = i.finish_prefill();
        assert_eq!(out.first_token, vec![0, 1]);
        assert_eq!(i.used_tokens, 302);
        let (run_end, _) = i.start_decode(end, &p, false);
        assert_eq!(run_end, 320);
        assert_eq!(i.used_tokens_at(310), 304);
        let out = i.finish_decode();
        assert_eq!(out.completed, vec![0]);
        assert_eq!(i.used_tokens, 203);
        assert_eq!(i.reserved_tokens, 205);
        i.start_decode(run_end, &p, false);
        let out = i.finish_decode();
        assert_eq!(out.completed, vec![1]);
        assert_eq!((i.used_tokens, i.reserved_tokens), (0, 0));
    }

    #[test]
    fn truncation_keeps_iteration_in_progress() {
        let p = PairProfile::analytic(1_000.0, 10.0);
        let mut i = inst(10_000);
        i.running.push(Slot {
            idx: 0,
            input: 10,
            output: 100,
            generated: 1,
        });
        i.used_tokens = 11;
        i.reserved_tokens = 110;
        i.start_decode(0, &p, false);
        assert_eq!(i.truncate_run(25), Some(30));
        assert_eq!(i.remaining_tokens(25), 99 - 2);
        let out = i.finish_decode();
        assert!(out.completed.is_empty());
        assert_eq!(i.running[0].generated, 4);
    }
}
