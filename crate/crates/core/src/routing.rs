//! Request routing: region selection, deployment and instance selection, and
//! instance queue ordering.

use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Catalog, LatencyDist, RegionId, SimTime, Tier, SECOND};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RoutingError {
    #[error("model is not deployed in any region")]
    ModelNowhereDeployed,
    #[error("endpoint has no private instances")]
    NoInstances,
    #[error("unknown scheduling policy `{0}`")]
    UnknownPolicy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Fcfs,
    Edf,
    Pf,
    Dpa,
}

impl Policy {
    pub const ALL: [Policy; 4] = [Policy::Fcfs, Policy::Edf, Policy::Pf, Policy::Dpa];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Fcfs => "fcfs",
            Policy::Edf => "edf",
            Policy::Pf => "pf",
            Policy::Dpa => "dpa",
        }
    }
}

impl FromStr for Policy {
    type Err = RoutingError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "fcfs" => Ok(Policy::Fcfs),
            "edf" => Ok(Policy::Edf),
            "pf" => Ok(Policy::Pf),
            "dpa" => Ok(Policy::Dpa),
            _ => Err(RoutingError::UnknownPolicy(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub policy: Policy,
    pub tau_n: SimTime,
    pub tau_p: SimTime,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self {
            policy: Policy::Fcfs,
            tau_n: 60 * SECOND,
            tau_p: 10 * SECOND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRoutingConfig {
    pub utilization_threshold: f64,
    /// Per client region, candidate serving regions in preference order.
    pub preference: Vec<Vec<RegionId>>,
}

fn expected_latency(d: &LatencyDist) -> f64 {
    match d {
        LatencyDist::Fixed(ms) => *ms as f64,
        LatencyDist::Mixture(bands) => {
            let total: f64 = bands.iter().map(|b| b.weight).sum();
            bands
                .iter()
                .map(|b| b.weight * (b.lo_ms + b.hi_ms) as f64 / 2.0)
                .sum::<f64>()
                / total
        }
    }
}

impl RegionRoutingConfig {
    /// Preference by ascending expected latency; ties by region id.
    pub fn from_catalog(catalog: &Catalog, utilization_threshold: f64) -> Self {
        let preference = catalog
            .regions
            .iter()
            .map(|r| {
                let mut ids: Vec<RegionId> = catalog.region_ids().collect();
                ids.sort_by(|a, b| {
                    expected_latency(&r.latency[a.index()])
                        .total_cmp(&expected_latency(&r.latency[b.index()]))
                        .then(a.cmp(b))
                });
                ids
            })
            .collect();
        Self {
            utilization_threshold,
            preference,
        }
    }
}

/// Ordering-relevant attributes of a queued request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueKey {
    /// Index into the simulation's request table.
    pub idx: u32,
    pub arrival_ts: SimTime,
    pub tier: Tier,
    pub priority: u8,
    /// TTFT deadline, or the completion deadline for NIW.
    pub deadline: SimTime,
    pub input_tokens: u32,
    pub output_tokens: u32,
}

impl QueueKey {
    pub fn remaining(&self, now: SimTime) -> i64 {
        self.deadline as i64 - now as i64
    }
}

fn tier_rank(t: Tier) -> u8 {
    match t {
        Tier::IwFast => 0,
        Tier::IwNormal => 1,
        Tier::Niw => 2,
    }
}

/// DPA bucket, 0 served first. Escalated NIW is treated as IW-N.
pub fn dpa_bucket(k: &QueueKey, now: SimTime, tau_n: SimTime, tau_p: SimTime) -> u8 {
    let d = k.remaining(now);
    let fast = k.tier == Tier::IwFast;
    if d < -(tau_n as i64) {
        0
    } else if d < 0 {
        5
    } else if d <= tau_p as i64 {
        if fast {
            1
        } else {
            2
        }
    } else if fast {
        3
    } else {
        4
    }
}

/// Sorts `queue` in place per the policy. Priority-1 entries always follow
/// priority-0 entries; every sort is stable.
pub fn order_queue(queue: &mut [QueueKey], now: SimTime, cfg: &SchedulerConfig) {
    match cfg.policy {
        Policy::Fcfs => queue.sort_by_key(|k| (k.priority, k.arrival_ts)),
        Policy::Edf => queue.sort_by_key(|k| (k.priority, k.remaining(now))),
        Policy::Pf => queue.sort_by_key(|k| (k.priority, tier_rank(k.tier), k.arrival_ts)),
        Policy::Dpa => queue.sort_by_key(|k| {
            (
                k.priority,
                dpa_bucket(k, now, cfg.tau_n, cfg.tau_p),
                k.arrival_ts,
            )
        }),
    }
}

/// Σ used / Σ capacity over `(used, capacity)` pairs.
pub fn effective_utilization(
    instances: impl IntoIterator<Item = (u64, u64)>,
) -> Result<f64, RoutingError> {
    let (mut used, mut cap, mut n) = (0u128, 0u128, 0usize);
    for (u, c) in instances {
        used += u as u128;
        cap += c as u128;
        n += 1;
    }
    if n == 0 || cap == 0 {
        return Err(RoutingError::NoInstances);
    }
    Ok(used as f64 / cap as f64)
}

/// Chooses a serving region. `utils[r]` is `None` where the model has no
/// private instances.
pub fn route_global_iw(
    utils: &[Option<f64>],
    preference: &[RegionId],
    threshold: f64,
) -> Result<RegionId, RoutingError> {
    let candidates = preference
        .iter()
        .filter_map(|&r| utils[r.index()].map(|u| (r, u)));
    if let Some((r, _)) = candidates.clone().find(|&(_, u)| u < threshold) {
        return Ok(r);
    }
    candidates
        .fold(None, |best: Option<(RegionId, f64)>, (r, u)| match best {
            Some((_, bu)) if bu <= u => best,
            _ => Some((r, u)),
        })
        .map(|(r, _)| r)
        .ok_or(RoutingError::ModelNowhereDeployed)
}

/// Splits `n` instances (sorted by id) into ⌈n/3⌉ contiguous balanced groups.
pub fn partition_deployments(n: usize, max_per_deployment: usize) -> Vec<Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let groups = n.div_ceil(max_per_deployment.max(1));
    let (base, extra) = (n / groups, n % groups);
    let mut start = 0;
    (0..groups)
        .map(|g| {
            let len = base + usize::from(g < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Index of the minimum, ties to the lowest index.
pub fn argmin_by<T: Copy + PartialOrd>(values: impl IntoIterator<Item = T>) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match best {
            Some((_, b)) if !(v < b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Join-the-shortest-queue over `(instance id, remaining tokens)`; ties to the
/// lowest id.
pub fn route_to_instance<I: Ord + Copy>(
    candidates: impl IntoIterator<Item = (I, u64)>,
) -> Option<I> {
    candidates
        .into_iter()
        .min_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn key(idx: u32, arrival: SimTime, tier: Tier, deadline: SimTime) -> QueueKey {
        QueueKey {
            idx,
            arrival_ts: arrival,
            tier,
            priority: u8::from(tier == Tier::Niw),
            deadline,
            input_tokens: 1,
            output_tokens: 1,
        }
    }

    fn ids(q: &[QueueKey]) -> Vec<u32> {
        q.iter().map(|k| k.idx).collect()
    }

    #[test]
    fn utilization_examples() {
        let gb = 1_000_000_000;
        let u = effective_utilization([(30 * gb, 100 * gb), (50 * gb, 100 * gb)]).unwrap();
        assert!((u - 0.40).abs() < 1e-12);
        assert_eq!(effective_utilization([(0, 10), (0, 10)]).unwrap(), 0.0);
        assert_eq!(effective_utilization([(10, 10)]).unwrap(), 1.0);
        assert_eq!(
            effective_utilization(std::iter::empty()),
            Err(RoutingError::NoInstances)
        );
    }

    #[test]
    fn global_routing_examples() {
        let pref = [RegionId(0), RegionId(1), RegionId(2)];
        let r = |u: [f64; 3]| route_global_iw(&u.map(Some), &pref, 0.70).unwrap();
        assert_eq!(r([0.72, 0.65, 0.90]), RegionId(1));
        assert_eq!(r([0.85, 0.80, 0.95]), RegionId(1));
        assert_eq!(r([0.80, 0.80, 0.95]), RegionId(0));
        assert_eq!(
            route_global_iw(&[None, Some(0.9), None], &pref, 0.7).unwrap(),
            RegionId(1)
        );
        assert_eq!(
            route_global_iw(&[None, None, None], &pref, 0.7),
            Err(RoutingError::ModelNowhereDeployed)
        );
    }

    #[test]
    fn jsq_examples() {
        assert_eq!(
            route_to_instance([(0u32, 500), (1, 200), (2, 800)]),
            Some(1)
        );
        assert_eq!(route_to_instance([(3u32, 0), (1, 0), (2, 0)]), Some(1));
    }

    #[test]
    fn edf_example() {
        let now = 100_000;
        let mut q = vec![
            key(0, 0, Tier::IwFast, now + 5_000),
            key(1, 1, Tier::IwFast, now - 2_000),
            key(2, 2, Tier::IwNormal, now + 30_000),
        ];
        order_queue(
            &mut q,
            now,
            &SchedulerConfig {
                policy: Policy::Edf,
                ..Default::default()
            },
        );
        assert_eq!(ids(&q), vec![1, 0, 2]);
    }

    #[test]
    fn pf_example() {
        let mut q = vec![
            key(0, 1, Tier::IwNormal, 1_000_000),
            key(1, 2, Tier::IwFast, 1_000_000),
            key(2, 3, Tier::IwNormal, 1_000_000),
            key(3, 4, Tier::IwFast, 1_000_000),
        ];
        order_queue(
            &mut q,
            0,
            &SchedulerConfig {
                policy: Policy::Pf,
                ..Default::default()
            },
        );
        assert_eq!(ids(&q), vec![1, 3, 0, 2]);
    }

    #[test]
    fn dpa_example() {
        let now = 1_000_000;
        let cfg = SchedulerConfig {
            policy: Policy::Dpa,
            tau_n: 30_000,
            tau_p: 10_000,
        };
        let at = |d: i64| (now as i64 + d) as SimTime;
        // Arrival order deliberately scrambled.
        let mut q = vec![
            key(5, 0, Tier::IwNormal, at(-10_000)),
            key(3, 1, Tier::IwFast, at(50_000)),
            key(0, 2, Tier::IwFast, at(-60_000)),
            key(4, 3, Tier::IwNormal, at(40_000)),
            key(2, 4, Tier::IwNormal, at(8_000)),
            key(1, 5, Tier::IwFast, at(5_000)),
        ];
        order_queue(&mut q, now, &cfg);
        assert_eq!(ids(&q), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn niw_priority_one_sorts_last_everywhere() {
        for policy in Policy::ALL {
            let mut q = vec![
                key(0, 0, Tier::Niw, 0),
                key(1, 5, Tier::IwNormal, 10_000_000),
            ];
            order_queue(
                &mut q,
                1_000,
                &SchedulerConfig {
                    policy,
                    ..Default::default()
                },
            );
            assert_eq!(ids(&q), vec![1, 0], "{policy:?}");
        }
    }

    #[test]
    fn deployment_partition_is_balanced() {
        assert_eq!(partition_deployments(20, 3).len(), 7);
        assert_eq!(partition_deployments(4, 3), vec![0..2, 2..4]);
        assert_eq!(partition_deployments(3, 3), vec![0..3]);
        assert_eq!(partition_deployments(7, 3), vec![0..3, 3..5, 5..7]);
        assert!(partition_deployments(0, 3).is_empty());
    }

    #[test]
    fn policies_parse() {
        for p in Policy::ALL {
            assert_eq!(p.as_str().parse::<Policy>().unwrap(), p);
        }
        assert!("lifo".parse::<Policy>().is_err());
    }

    proptest! {
        #[test]
        fn dpa_with_zero_thresholds_on_iw_f_is_expired_then_fcfs(
            entries in prop::collection::vec((0u64..1_000, 0u64..2_000), 0..40)
        ) {
            let now = 1_000;
            // d_r == 0 is "urgent", not "non-urgent", so it would jump ahead.
            prop_assume!(entries.iter().all(|&(_, d)| d != now));
            let mut q: Vec<QueueKey> = entries.iter().enumerate()
                .map(|(i, &(a, d))| key(i as u32, a, Tier::IwFast, d)).collect();
            let mut expected = q.clone();
            expected.sort_by_key(|k| (u8::from(k.remaining(now) >= 0), k.arrival_ts));
            order_queue(&mut q, now, &SchedulerConfig { policy: Policy::Dpa, tau_n: 0, tau_p: 0 });
            prop_assert_eq!(ids(&q), ids(&expected));
        }
    }
}
