//! Append-only run ledger and post-hoc aggregation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{Pool, Source};
use crate::types::{GpuId, InstanceId, ModelId, RegionId, SimTime, Tier, HOUR};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("percentile of an empty set")]
    EmptySet,
    #[error("percentile {0} outside [0, 100]")]
    BadPercentile(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub id: u64,
    pub tier: Tier,
    pub model: ModelId,
    pub client_region: RegionId,
    pub served_region: Option<RegionId>,
    pub instance: Option<InstanceId>,
    pub arrival_ts: SimTime,
    pub routed_ts: Option<SimTime>,
    pub dequeued_ts: Option<SimTime>,
    pub first_token_ts: Option<SimTime>,
    pub completed_ts: Option<SimTime>,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub ttft_deadline: Option<SimTime>,
    pub completion_deadline: SimTime,
    /// Priority when the request entered an instance queue.
    pub priority: u8,
}

impl RequestRecord {
    pub fn ttft(&self) -> Option<SimTime> {
        self.first_token_ts.map(|t| t - self.arrival_ts)
    }

    pub fn e2e(&self) -> Option<SimTime> {
        self.completed_ts.map(|t| t - self.arrival_ts)
    }

    /// IW: first token after the TTFT deadline. NIW: completion after the
    /// completion deadline. Unfinished requests count as violations.
    pub fn violated(&self) -> bool {
        match (self.tier.is_interactive(), self.ttft_deadline) {
            (true, Some(d)) => self.first_token_ts.is_none_or(|t| t > d),
            _ => self
                .completed_ts
                .is_none_or(|t| t > self.completion_deadline),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleKind {
    Provisioning,
    Private,
    Spot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleInterval {
    pub model: ModelId,
    pub role: RoleKind,
    pub start: SimTime,
    pub end: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub id: InstanceId,
    pub gpu: GpuId,
    pub region: RegionId,
    pub pool: Pool,
    pub gpus: u32,
    pub intervals: Vec<RoleInterval>,
}

/// Private-instance count change, kept independently of role intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountChange {
    pub ts: SimTime,
    pub model: ModelId,
    pub region: RegionId,
    pub delta: i32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvisioningRecord {
    pub instance: InstanceId,
    pub model: ModelId,
    pub region: RegionId,
    pub source: Source,
    pub start: SimTime,
    pub end: SimTime,
    pub gpus: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleAction {
    Out(Source),
    In,
    NoCapacity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleEvent {
    pub ts: SimTime,
    pub model: ModelId,
    pub region: RegionId,
    pub pool: Pool,
    pub action: ScaleAction,
    /// Private plus provisioning instances after the action.
    pub count_after: u32,
    /// Plan target in force, if any.
    pub target: Option<u32>,
    /// Observed/predicted TPS ratio when the action was taken past the target.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilSeries {
    pub model: ModelId,
    pub region: RegionId,
    pub pool: Pool,
    /// One value per sample period, `None` where the endpoint had no instances.
    pub values: Vec<Option<f32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub tick: SimTime,
    pub model: ModelId,
    pub region: RegionId,
    pub gpu: GpuId,
    pub delta: i64,
    pub gamma: f64,
    pub mu: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub perf_extrapolation: u64,
    pub oversize_admissions: u64,
    pub unsorted_trace: u64,
    pub backlogged: u64,
    pub clamps: u64,
    pub clamp_objective_changes: u64,
    pub infeasible_ticks: u64,
    pub solver_timeouts: u64,
    pub floor_conflicts: u64,
    pub memory_violations: u64,
    pub niw_escalations: u64,
    pub niw_force_releases: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub requests: Vec<RequestRecord>,
    pub instances: Vec<InstanceRecord>,
    pub count_changes: Vec<CountChange>,
    pub provisioning: Vec<ProvisioningRecord>,
    pub scale_events: Vec<ScaleEvent>,
    pub sample_period: SimTime,
    pub utilization: Vec<UtilSeries>,
    pub plans: Vec<PlanRecord>,
    pub counters: Counters,
    /// End of the input trace.
    pub horizon: SimTime,
    /// Time the last event was processed.
    pub end_ts: SimTime,
}

/// Time window `[from, to)` for aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub from: SimTime,
    pub to: SimTime,
}

impl Window {
    pub fn all() -> Self {
        Window {
            from: 0,
            to: SimTime::MAX,
        }
    }

    fn overlap(&self, start: SimTime, end: SimTime) -> SimTime {
        end.min(self.to).saturating_sub(start.max(self.from))
    }

    fn contains(&self, t: SimTime) -> bool {
        t >= self.from && t < self.to
    }
}

/// Nearest-rank percentile.
pub fn percentile(values: &[SimTime], p: f64) -> Result<SimTime, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(MetricsError::BadPercentile(p.to_string()));
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Ok(v[rank.min(v.len()) - 1])
}

fn in_scope(model: ModelId, region: RegionId, m: Option<ModelId>, r: Option<RegionId>) -> bool {
    m.is_none_or(|x| x == model) && r.is_none_or(|x| x == region)
}

impl MetricsLedger {
    fn role_hours(
        &self,
        role: RoleKind,
        model: Option<ModelId>,
        region: Option<RegionId>,
        w: Window,
    ) -> f64 {
        let ms: SimTime = self
            .instances
            .iter()
            .flat_map(|i| i.intervals.iter().map(move |iv| (i.region, iv)))
            .filter(|(reg, iv)| iv.role == role && in_scope(iv.model, *reg, model, region))
            .map(|(_, iv)| w.overlap(iv.start, iv.end))
            .sum();
        ms as f64 / HOUR as f64
    }

    /// ∫ private instance count dt, from per-instance role intervals.
    pub fn instance_hours(
        &self,
        model: Option<ModelId>,
        region: Option<RegionId>,
        w: Window,
    ) -> f64 {
        self.role_hours(RoleKind::Private, model, region, w)
    }

    /// Same integral computed from the count-change timeline.
    pub fn instance_hours_from_timeline(
        &self,
        model: Option<ModelId>,
        region: Option<RegionId>,
        w: Window,
    ) -> f64 {
        let mut changes: Vec<&CountChange> = self
            .count_changes
            .iter()
            .filter(|c| in_scope(c.model, c.region, model, region))
            .collect();
        changes.sort_by_key(|c| c.ts);
        let end = self.end_ts;
        let (mut count, mut last, mut ms) = (0i64, 0, 0u64);
        for c in changes {
            ms += count as u64 * w.overlap(last, c.ts);
            count += c.delta as i64;
            last = c.ts;
        }
        ms += count as u64 * w.overlap(last, end);
        ms as f64 / HOUR as f64
    }

    pub fn spot_hours(&self, w: Window) -> f64 {
        self.role_hours(RoleKind::Spot, None, None, w)
    }

    /// GPU-hours spent provisioning, for provisioning that started in `w`.
    pub fn scaling_waste_hours(&self, w: Window) -> f64 {
        self.provisioning
            .iter()
            .filter(|p| w.contains(p.start))
            .map(|p| (p.end - p.start) as f64 * p.gpus as f64)
            .fold(0.0, |a, b| a + b)
            / HOUR as f64
    }

    /// Requests of `tier` arriving in `w`.
    pub fn tier_requests(&self, tier: Tier, w: Window) -> impl Iterator<Item = &RequestRecord> {
        self.requests
            .iter()
            .filter(move |r| r.tier == tier && w.contains(r.arrival_ts))
    }

    pub fn sla_violation_rate(&self, tier: Tier, w: Window) -> f64 {
        let (mut n, mut bad) = (0u64, 0u64);
        for r in self.tier_requests(tier, w) {
            n += 1;
            bad += u64::from(r.violated());
        }
        if n == 0 {
            0.0
        } else {
            bad as f64 / n as f64
        }
    }

    pub fn ttfts(&self, tier: Tier, w: Window) -> Vec<SimTime> {
        self.tier_requests(tier, w)
            .filter_map(RequestRecord::ttft)
            .collect()
    }

    pub fn e2es(&self, tier: Tier, w: Window) -> Vec<SimTime> {
        self.tier_requests(tier, w)
            .filter_map(RequestRecord::e2e)
            .collect()
    }

    /// TTFTs of all interactive requests arriving in `w`.
    pub fn iw_ttfts(&self, w: Window) -> Vec<SimTime> {
        let mut v = self.ttfts(Tier::IwFast, w);
        v.extend(self.ttfts(Tier::IwNormal, w));
        v
    }

    pub fn series(&self, model: ModelId, region: RegionId, pool: Pool) -> Option<&UtilSeries> {
        self.utilization
            .iter()
            .find(|s| s.model == model && s.region == region && s.pool == pool)
    }

    /// Deterministic serialized form, used for byte-level comparison.
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("ledger serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::MINUTE;

    #[test]
    fn nearest_rank_examples() {
        assert_eq!(percentile(&[10, 20, 30, 40], 50.0).unwrap(), 20);
        assert_eq!(percentile(&[40, 10, 30, 20], 100.0).unwrap(), 40);
        assert_eq!(percentile(&[7], 95.0).unwrap(), 7);
        assert_eq!(percentile(&[], 50.0), Err(MetricsError::EmptySet));
        assert_eq!(percentile(&[1, 2], 0.0).unwrap(), 1);
    }

    fn inst(id: u32, intervals: Vec<RoleInterval>) -> InstanceRecord {
        InstanceRecord {
            id: InstanceId(id),
            gpu: GpuId(0),
            region: RegionId(0),
            pool: Pool::Shared,
            gpus: 8,
            intervals,
        }
    }

    fn private(start: SimTime, end: SimTime) -> RoleInterval {
        RoleInterval {
            model: ModelId(0),
            role: RoleKind::Private,
            start,
            end,
        }
    }

    #[test]
    fn instance_hours_examples_agree_both_ways() {
        let mut l = MetricsLedger {
            end_ts: 3 * HOUR,
            ..Default::default()
        };
        l.instances = vec![
            inst(0, vec![private(0, 3 * HOUR)]),
            inst(1, vec![private(0, 3 * HOUR)]),
        ];
        l.count_changes = vec![CountChange {
            ts: 0,
            model: ModelId(0),
            region: RegionId(0),
            delta: 2,
        }];
        assert_eq!(l.instance_hours(None, None, Window::all()), 6.0);
        assert_eq!(
            l.instance_hours_from_timeline(None, None, Window::all()),
            6.0
        );

        l.instances.push(inst(2, vec![private(HOUR, 3 * HOUR)]));
        l.count_changes.push(CountChange {
            ts: HOUR,
            model: ModelId(0),
            region: RegionId(0),
            delta: 1,
        });
        assert_eq!(l.instance_hours(None, None, Window::all()), 8.0);
        assert_eq!(
            l.instance_hours_from_timeline(None, None, Window::all()),
            8.0
        );
        let w = Window {
            from: 2 * HOUR,
            to: 3 * HOUR,
        };
        assert_eq!(l.instance_hours(None, None, w), 3.0);
        assert_eq!(l.instance_hours_from_timeline(None, None, w), 3.0);
    }

    #[test]
    fn waste_examples() {
        let rec = |start| ProvisioningRecord {
            instance: InstanceId(0),
            model: ModelId(0),
            region: RegionId(0),
            source: Source::FreshVm {
                local_weights: true,
            },
            start,
            end: start + 10 * MINUTE,
            gpus: 8,
        };
        let mut l = MetricsLedger::default();
        assert_eq!(l.scaling_waste_hours(Window::all()), 0.0);
        l.provisioning.push(rec(0));
        assert!((l.scaling_waste_hours(Window::all()) - 8.0 / 6.0).abs() < 1e-12);
        l.provisioning.push(rec(0));
        assert!((l.scaling_waste_hours(Window::all()) - 16.0 / 6.0).abs() < 1e-12);
    }

    fn req(tier: Tier, first: Option<SimTime>, done: Option<SimTime>) -> RequestRecord {
        RequestRecord {
            id: 0,
            tier,
            model: ModelId(0),
            client_region: RegionId(0),
            served_region: Some(RegionId(0)),
            instance: None,
            arrival_ts: 0,
            routed_ts: Some(0),
            dequeued_ts: first,
            first_token_ts: first,
            completed_ts: done,
            input_tokens: 1,
            output_tokens: 1,
            ttft_deadline: tier.is_interactive().then_some(1_000),
            completion_deadline: 10_000,
            priority: 0,
        }
    }

    #[test]
    fn violation_rate_examples() {
        let mut l = MetricsLedger::default();
        l.requests = (0..4)
            .map(|_| req(Tier::IwFast, Some(500), Some(600)))
            .collect();
        assert_eq!(l.sla_violation_rate(Tier::IwFast, Window::all()), 0.0);
        l.requests[3].first_token_ts = Some(1_500);
        assert_eq!(l.sla_violation_rate(Tier::IwFast, Window::all()), 0.25);
        // NIW is judged on completion only: a late first token is fine.
        l.requests.push(req(Tier::Niw, Some(5_000), Some(9_000)));
        l.requests.push(req(Tier::Niw, Some(100), Some(12_000)));
        assert_eq!(l.sla_violation_rate(Tier::Niw, Window::all()), 0.5);
    }
}
