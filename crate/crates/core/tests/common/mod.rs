//! Independent oracles and scenario builders shared by the integration tests.
#![allow(dead_code)]

use std::time::Duration;

use fleetsim_core::autoscaler::Strategy;
use fleetsim_core::experiment::{desk_scale_tokens, Scenario, Settings};
use fleetsim_core::optimizer::{Fleet, Grid, ModelDemand, OptimizerConfig};
use fleetsim_core::routing::{Policy, QueueKey};
use fleetsim_core::types::{Catalog, SimTime, Tier, DAY, HOUR, MINUTE};
use fleetsim_core::workload::{ScheduledBurst, StreamSpec, SyntheticWorkloadSpec};
use rand::Rng;

/// A random multi-model planning instance with integer costs so objective
/// values are exact in floating point.
#[derive(Debug, Clone)]
pub struct IlpCase {
    pub fleet: Fleet,
    pub demand: Vec<ModelDemand>,
    pub theta: Vec<Vec<f64>>,
    pub cap: i64,
    pub cfg: OptimizerConfig,
}

pub fn random_ilp<R: Rng>(rng: &mut R) -> IlpCase {
    let grid = Grid {
        models: rng.random_range(1..=3),
        regions: rng.random_range(1..=3),
        gpus: rng.random_range(1..=2),
    };
    // n + δ ≤ cap and δ ≥ −n, so |δ| ≤ 6 needs cap − 6 ≤ n ≤ 6.
    let cap = rng.random_range(1..=8i64);
    let n = (0..grid.len())
        .map(|_| rng.random_range((cap - 6).max(0)..=cap.min(6)))
        .collect();
    let theta: Vec<Vec<f64>> = (0..grid.models)
        .map(|_| {
            (0..grid.gpus)
                .map(|_| rng.random_range(1..=30) as f64 * 10.0)
                .collect()
        })
        .collect();
    let demand = (0..grid.models)
        .map(|_| {
            let regional_peak: Vec<f64> = (0..grid.regions)
                .map(|_| rng.random_range(0.0..1500.0))
                .collect();
            let sum: f64 = regional_peak.iter().sum();
            ModelDemand {
                global_peak: sum * rng.random_range(0.5..1.2),
                regional_peak,
            }
        })
        .collect();
    let cfg = OptimizerConfig {
        epsilon: [0.5, 0.6, 1.0][rng.random_range(0..3)],
        alpha: (0..grid.gpus)
            .map(|_| rng.random_range(1..=9) as f64)
            .collect(),
        sigma: (0..grid.models)
            .map(|_| {
                (0..grid.gpus)
                    .map(|_| rng.random_range(1..=4) as f64)
                    .collect()
            })
            .collect(),
        budget: Duration::from_secs(60),
    };
    IlpCase {
        fleet: Fleet { grid, n },
        demand,
        theta,
        cap,
        cfg,
    }
}

/// Exhaustive minimum of γ + μ over every δ in the bounds. Demand the caps
/// cannot meet is lowered to what the caps allow.
pub fn brute_force(case: &IlpCase) -> f64 {
    let g = case.fleet.grid;
    let per = g.regions * g.gpus;
    let mut total = 0.0;
    for m in 0..g.models {
        let n = &case.fleet.n[m * per..(m + 1) * per];
        let theta = &case.theta[m];
        let lo: Vec<i64> = n.iter().map(|&x| -x).collect();
        let hi: Vec<i64> = n.iter().map(|&x| (case.cap - x).max(0)).collect();
        let supply = |d: &[i64], region: Option<usize>| -> f64 {
            (0..per)
                .filter(|&i| region.is_none_or(|r| i / g.gpus == r))
                .map(|i| (n[i] + d[i]) as f64 * theta[i % g.gpus])
                .sum()
        };
        let mut regional: Vec<f64> = case.demand[m]
            .regional_peak
            .iter()
            .map(|p| case.cfg.epsilon * p)
            .collect();
        for (r, d) in regional.iter_mut().enumerate() {
            *d = d.min(supply(&hi, Some(r)));
        }
        let global = case.demand[m].global_peak.min(supply(&hi, None));
        let tol = |d: f64| 1e-9 * d.abs().max(1.0);
        let mut best = f64::INFINITY;
        let mut d = lo.clone();
        loop {
            let ok = (0..g.regions).all(|r| supply(&d, Some(r)) >= regional[r] - tol(regional[r]))
                && supply(&d, None) >= global - tol(global);
            if ok {
                let obj: f64 = (0..per)
                    .map(|i| {
                        let k = i % g.gpus;
                        case.cfg.alpha[k] * d[i] as f64 + case.cfg.sigma[m][k] * d[i].max(0) as f64
                    })
                    .sum();
                best = best.min(obj);
            }
            // Odometer increment.
            let mut i = 0;
            while i < per {
                if d[i] < hi[i] {
                    d[i] += 1;
                    break;
                }
                d[i] = lo[i];
                i += 1;
            }
            if i == per {
                break;
            }
        }
        total += best;
    }
    total
}

pub fn random_queue<R: Rng>(rng: &mut R) -> (Vec<QueueKey>, SimTime) {
    let len = rng.random_range(0..40);
    let now = rng.random_range(0..200_000u64);
    let q = (0..len)
        .map(|i| {
            let tier = [Tier::IwFast, Tier::IwNormal, Tier::Niw][rng.random_range(0..3)];
            let priority = if tier == Tier::Niw {
                rng.random_range(0..=1)
            } else {
                0
            };
            // Coarse grids make ties common.
            let arrival_ts = rng.random_range(0..40u64) * 1_000;
            let deadline = rng.random_range(0..60u64) * 5_000;
            QueueKey {
                idx: i,
                arrival_ts,
                tier,
                priority,
                deadline,
                input_tokens: rng.random_range(1..4_000),
                output_tokens: rng.random_range(1..500),
            }
        })
        .collect();
    (q, now)
}

/// Reference orderings: stable sorts and a six-way bucket sort.
pub fn reference_order(
    q: &[QueueKey],
    now: SimTime,
    policy: Policy,
    tau_n: SimTime,
    tau_p: SimTime,
) -> Vec<u32> {
    let mut out = Vec::with_capacity(q.len());
    for priority in 0..=1u8 {
        let mut part: Vec<QueueKey> = q
            .iter()
            .copied()
            .filter(|k| k.priority == priority)
            .collect();
        match policy {
            Policy::Fcfs => part.sort_by_key(|k| k.arrival_ts),
            Policy::Edf => {
                let d = |k: &QueueKey| k.deadline as i128 - now as i128;
                part.sort_by_key(d);
            }
            Policy::Pf => {
                let mut fcfs = part.clone();
                fcfs.sort_by_key(|k| k.arrival_ts);
                part = [Tier::IwFast, Tier::IwNormal, Tier::Niw]
                    .iter()
                    .flat_map(|t| fcfs.iter().copied().filter(move |k| k.tier == *t))
                    .collect();
            }
            Policy::Dpa => {
                let mut fcfs = part.clone();
                fcfs.sort_by_key(|k| k.arrival_ts);
                let mut buckets: [Vec<QueueKey>; 6] = Default::default();
                for k in fcfs {
                    let d = k.deadline as i128 - now as i128;
                    let fast = k.tier == Tier::IwFast;
                    let b = if d < -(tau_n as i128) {
                        0
                    } else if d < 0 {
                        5
                    } else if d <= tau_p as i128 {
                        if fast {
                            1
                        } else {
                            2
                        }
                    } else if fast {
                        3
                    } else {
                        4
                    };
                    buckets[b].push(k);
                }
                part = buckets.concat();
            }
        }
        out.extend(part.iter().map(|k| k.idx));
    }
    out
}

/// Least-squares slope of `x[t]` on `x[t-1]` with an intercept.
pub fn ols_ar1(x: &[f64]) -> f64 {
    let n = (x.len() - 1) as f64;
    let (xs, ys) = (&x[..x.len() - 1], &x[1..]);
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = xs.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Piecewise-linear lookup with end-segment extrapolation, rounded to whole
/// milliseconds with a 1 ms floor.
pub fn interpolate_ms(points: &[(f64, f64)], x: f64) -> SimTime {
    let i = points
        .windows(2)
        .position(|w| x <= w[1].0)
        .unwrap_or(points.len() - 2);
    let (a, b) = (points[i], points[i + 1]);
    let y = a.1 + (x - a.0) * (b.1 - a.1) / (b.0 - a.0);
    (y.max(0.0).round() as SimTime).max(1)
}

/// One weekday of llama3.1-8b traffic only, split evenly between the two
/// interactive tiers, on a fixed two-instance fleet per region.
pub fn stressed_scheduling(policy: Policy) -> Scenario {
    let cat = Catalog::desk_scale();
    let m = cat.model_id("llama3.1-8b").unwrap();
    let streams = cat
        .region_ids()
        .flat_map(|r| {
            [Tier::IwFast, Tier::IwNormal].map(|tier| StreamSpec {
                model: m,
                region: r,
                tier,
                base_rps: 0.8,
                diurnal_amplitude: 0.5,
                weekend_damping: 0.6,
                burst_probability: 0.0,
                burst_multiplier: 1.0,
            })
        })
        .collect();
    let spec = SyntheticWorkloadSpec {
        duration: DAY,
        start_offset: DAY,
        peak_hour: 14.0,
        region_offsets_hours: vec![0.0, -1.0, -2.0],
        burst_window: 5 * MINUTE,
        streams,
        tokens: desk_scale_tokens(),
        scheduled_bursts: Vec::new(),
        seed: 5,
    };
    let settings = Settings {
        initial_instances: 2,
        measure_from: 0,
        policy,
        seed: 5,
        ..Settings::default()
    };
    Scenario::synthetic(cat, &spec, settings).unwrap()
}

pub const STRESSED_STRATEGY: Strategy = Strategy::Static;

pub const BURST_START: SimTime = 13 * HOUR + 35 * MINUTE;
pub const BURST_LEN: SimTime = 20 * MINUTE;

/// The desk-scale day with an 8× llama2-70b burst in every region.
pub fn burst_scenario(seed: u64) -> Scenario {
    burst_scenario_at(seed, BURST_START, BURST_LEN)
}

pub fn burst_scenario_at(seed: u64, start: SimTime, len: SimTime) -> Scenario {
    let cat = Catalog::desk_scale();
    let mut spec = fleetsim_core::experiment::desk_scale_workload(&cat, seed);
    spec.scheduled_bursts.push(ScheduledBurst {
        model: Some(cat.model_id("llama2-70b").unwrap()),
        start,
        duration: len,
        multiplier: 8.0,
    });
    Scenario::synthetic(
        cat,
        &spec,
        Settings {
            seed,
            ..Settings::default()
        },
    )
    .unwrap()
}

/// Seconds after the burst ends until shared-pool utilization of `model`
/// stays below `threshold` in every region for five minutes. `None` if it
/// never settles.
pub fn recovery_secs(
    ledger: &fleetsim_core::metrics::MetricsLedger,
    cat: &Catalog,
    model: &str,
    threshold: f32,
) -> Option<u64> {
    recovery_after(ledger, cat, model, threshold, BURST_START + BURST_LEN)
}

pub fn recovery_after(
    ledger: &fleetsim_core::metrics::MetricsLedger,
    cat: &Catalog,
    model: &str,
    threshold: f32,
    end: SimTime,
) -> Option<u64> {
    use fleetsim_core::sim::Pool;
    let m = cat.model_id(model).unwrap();
    let series: Vec<&Vec<Option<f32>>> = cat
        .region_ids()
        .filter_map(|r| ledger.series(m, r, Pool::Shared).map(|s| &s.values))
        .collect();
    let period = ledger.sample_period;
    // values[k] is the sample taken at (k + 1) * period.
    let from = (end / period) as usize;
    let hold = (5 * MINUTE / period) as usize;
    let len = series.iter().map(|s| s.len()).min()?;
    let over = |k: usize| series.iter().any(|s| s[k].is_some_and(|u| u >= threshold));
    let mut k = from;
    while k + hold <= len {
        match (k..k + hold).find(|&j| over(j)) {
            None => return Some(((k - from) as u64 * period) / 1_000),
            Some(j) => k = j + 1,
        }
    }
    None
}
