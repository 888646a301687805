//! Synthetic multi-tier workloads: inhomogeneous Poisson arrivals with a
//! raised-cosine daily profile, weekend damping and random bursts.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};

use super::WorkloadError;
use crate::config::FlatConfig;
use crate::perf::TokenMoments;
use crate::types::{
    Catalog, ModelId, RegionId, Request, SimTime, SlaDefaults, Tier, DAY, HOUR, MINUTE, SECOND,
};

const MAX_TOKENS: f64 = 128_000.0;

/// Arrival process for one (model, client region, tier) triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub model: ModelId,
    pub region: RegionId,
    pub tier: Tier,
    /// Mean requests per second over a weekday.
    pub base_rps: f64,
    pub diurnal_amplitude: f64,
    /// Rate multiplier applied on Saturday and Sunday.
    pub weekend_damping: f64,
    /// Probability that a burst starts in any given minute.
    pub burst_probability: f64,
    pub burst_multiplier: f64,
}

/// Log-normal token counts, parameterised by median and log-space sigma.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenDist {
    pub input_median: f64,
    pub input_sigma: f64,
    pub output_median: f64,
    pub output_sigma: f64,
}

impl TokenDist {
    pub fn moments(&self) -> TokenMoments {
        let mean = |median: f64, s: f64| median * (s * s / 2.0).exp();
        TokenMoments {
            mean_input: mean(self.input_median, self.input_sigma),
            mean_output: mean(self.output_median, self.output_sigma),
            mean_output_sq: self.output_median.powi(2) * (2.0 * self.output_sigma.powi(2)).exp(),
        }
    }

    fn samplers(&self) -> (LogNormal<f64>, LogNormal<f64>) {
        (
            LogNormal::new(self.input_median.ln(), self.input_sigma).expect("validated"),
            LogNormal::new(self.output_median.ln(), self.output_sigma).expect("validated"),
        )
    }
}

/// A deterministic load multiplier, e.g. an injected 8x spike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduledBurst {
    /// `None` applies to every model.
    pub model: Option<ModelId>,
    pub start: SimTime,
    pub duration: SimTime,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorkloadSpec {
    pub duration: SimTime,
    /// Wall-clock time since Monday 00:00 at simulation time zero.
    pub start_offset: SimTime,
    /// Local hour of the daily peak.
    pub peak_hour: f64,
    /// Local-time offset of each region relative to the simulation clock.
    pub region_offsets_hours: Vec<f64>,
    /// Length of a random burst once triggered.
    pub burst_window: SimTime,
    pub streams: Vec<StreamSpec>,
    /// Indexed by model id.
    pub tokens: Vec<TokenDist>,
    pub scheduled_bursts: Vec<ScheduledBurst>,
    pub seed: u64,
}

impl SyntheticWorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: String| Err(WorkloadError::InvalidSpec(m));
        if self.duration == 0 {
            return bad("duration must be positive".into());
        }
        for (i, s) in self.streams.iter().enumerate() {
            let in_unit = |x: f64| (0.0..=1.0).contains(&x);
            if !(s.base_rps >= 0.0 && s.base_rps.is_finite()) {
                return bad(format!("stream {i}: base_rps must be >= 0"));
            }
            if !in_unit(s.diurnal_amplitude)
                || !in_unit(s.weekend_damping)
                || !in_unit(s.burst_probability)
            {
                return bad(format!(
                    "stream {i}: amplitude, damping and burst probability must lie in [0,1]"
                ));
            }
            if !(s.burst_multiplier > 0.0) {
                return bad(format!("stream {i}: burst multiplier must be > 0"));
            }
            let Some(t) = self.tokens.get(s.model.index()) else {
                return bad(format!(
                    "stream {i}: no token distribution for model {}",
                    s.model
                ));
            };
            if !(t.input_median >= 1.0
                && t.output_median >= 1.0
                && t.input_sigma >= 0.0
                && t.output_sigma >= 0.0)
            {
                return bad(format!(
                    "model {}: token medians must be >= 1 and sigmas >= 0",
                    s.model
                ));
            }
            if s.region.index() >= self.region_offsets_hours.len() {
                return bad(format!(
                    "stream {i}: region {} has no local-time offset",
                    s.region
                ));
            }
        }
        for b in &self.scheduled_bursts {
            if !(b.multiplier > 0.0) {
                return bad("scheduled burst multiplier must be > 0".into());
            }
        }
        Ok(())
    }

    /// Parses the flat `key = value` spec format. See the README for keys.
    pub fn from_flat(cfg: &FlatConfig, catalog: &Catalog) -> Result<Self, WorkloadError> {
        let hours: f64 = match cfg.get::<f64>("duration_days")? {
            Some(d) => d * 24.0,
            None => cfg.get_or("duration_hours", 24.0)?,
        };
        let mut spec = SyntheticWorkloadSpec {
            duration: (hours * HOUR as f64).round() as SimTime,
            start_offset: (cfg.get_or("start_weekday", 0u64)? * DAY)
                + (cfg.get_or("start_hour", 0.0f64)? * HOUR as f64).round() as SimTime,
            peak_hour: cfg.get_or("peak_hour", 14.0)?,
            region_offsets_hours: vec![0.0; catalog.regions.len()],
            burst_window: (cfg.get_or("burst_window_min", 5.0f64)? * MINUTE as f64) as SimTime,
            streams: Vec::new(),
            tokens: vec![
                TokenDist {
                    input_median: 1500.0,
                    input_sigma: 0.8,
                    output_median: 200.0,
                    output_sigma: 0.9
                };
                catalog.models.len()
            ],
            scheduled_bursts: Vec::new(),
            seed: cfg.get_or("seed", 0u64)?,
        };
        for (region, v) in cfg.with_prefix("region_offset") {
            let r = catalog.region_id(region)?;
            spec.region_offsets_hours[r.index()] =
                parse_f64(&format!("region_offset.{region}"), v)?;
        }

        let default = |field: &str, fallback: f64| -> Result<f64, WorkloadError> {
            Ok(cfg.get_or(&format!("defaults.{field}"), fallback)?)
        };
        let defaults = (
            default("amplitude", 0.0)?,
            default("weekend_damping", 1.0)?,
            default("burst_prob", 0.0)?,
            default("burst_mult", 1.0)?,
        );

        let mut streams: BTreeMap<(ModelId, RegionId, Tier), StreamSpec> = BTreeMap::new();
        for (rest, v) in cfg.with_prefix("stream") {
            let mut parts = rest.rsplitn(4, '.');
            let (Some(field), Some(tier), Some(region), Some(model)) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(WorkloadError::InvalidSpec(format!(
                    "malformed stream key `stream.{rest}`"
                )));
            };
            let key = (
                catalog.model_id(model)?,
                catalog.region_id(region)?,
                tier.parse::<Tier>()?,
            );
            let s = streams.entry(key).or_insert(StreamSpec {
                model: key.0,
                region: key.1,
                tier: key.2,
                base_rps: 0.0,
                diurnal_amplitude: defaults.0,
                weekend_damping: defaults.1,
                burst_probability: defaults.2,
                burst_multiplier: defaults.3,
            });
            let x = parse_f64(&format!("stream.{rest}"), v)?;
            match field {
                "base_rps" => s.base_rps = x,
                "amplitude" => s.diurnal_amplitude = x,
                "weekend_damping" => s.weekend_damping = x,
                "burst_prob" => s.burst_probability = x,
                "burst_mult" => s.burst_multiplier = x,
                other => {
                    return Err(WorkloadError::InvalidSpec(format!(
                        "unknown stream field `{other}`"
                    )))
                }
            }
        }
        spec.streams = streams.into_values().collect();

        for (rest, v) in cfg.with_prefix("tokens") {
            let (model, field) = rest.rsplit_once('.').ok_or_else(|| {
                WorkloadError::InvalidSpec(format!("malformed key `tokens.{rest}`"))
            })?;
            let t = &mut spec.tokens[catalog.model_id(model)?.index()];
            let x = parse_f64(&format!("tokens.{rest}"), v)?;
            match field {
                "input_median" => t.input_median = x,
                "input_sigma" => t.input_sigma = x,
                "output_median" => t.output_median = x,
                "output_sigma" => t.output_sigma = x,
                other => {
                    return Err(WorkloadError::InvalidSpec(format!(
                        "unknown token field `{other}`"
                    )))
                }
            }
        }

        let mut bursts: BTreeMap<&str, ScheduledBurst> = BTreeMap::new();
        for (rest, v) in cfg.with_prefix("burst") {
            let (name, field) = rest.rsplit_once('.').ok_or_else(|| {
                WorkloadError::InvalidSpec(format!("malformed key `burst.{rest}`"))
            })?;
            let b = bursts.entry(name).or_insert(ScheduledBurst {
                model: None,
                start: 0,
                duration: 0,
                multiplier: 1.0,
            });
            match field {
                "model" => b.model = Some(catalog.model_id(v)?),
                "start_min" => b.start = (parse_f64(rest, v)? * MINUTE as f64) as SimTime,
                "duration_min" => b.duration = (parse_f64(rest, v)? * MINUTE as f64) as SimTime,
                "multiplier" => b.multiplier = parse_f64(rest, v)?,
                other => {
                    return Err(WorkloadError::InvalidSpec(format!(
                        "unknown burst field `{other}`"
                    )))
                }
            }
        }
        spec.scheduled_bursts = bursts.into_values().collect();
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, WorkloadError> {
    v.parse().map_err(|_| {
        WorkloadError::Config(crate::config::ConfigError::Value {
            key: key.to_string(),
            value: v.to_string(),
        })
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn stream_rng(seed: u64, stream: usize, purpose: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(
        seed ^ splitmix64((stream as u64) << 8 | purpose),
    ))
}

/// A spec with its random burst windows drawn, so the arrival intensity is a
/// known deterministic function of time.
#[derive(Debug, Clone)]
pub struct SyntheticPlan {
    spec: SyntheticWorkloadSpec,
    /// Per stream, per minute: whether a random burst is active.
    bursts: Vec<Vec<bool>>,
}

impl SyntheticPlan {
    pub fn new(spec: SyntheticWorkloadSpec) -> Result<Self, WorkloadError> {
        spec.validate()?;
        let minutes = spec.duration.div_ceil(MINUTE) as usize;
        let window = spec.burst_window.div_ceil(MINUTE).max(1) as usize;
        let bursts = spec
            .streams
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut active = vec![false; minutes];
                if s.burst_probability > 0.0 {
                    let mut rng = stream_rng(spec.seed, i, 1);
                    for m in 0..minutes {
                        if rng.random::<f64>() < s.burst_probability {
                            active[m..(m + window).min(minutes)]
                                .iter_mut()
                                .for_each(|a| *a = true);
                        }
                    }
                }
                active
            })
            .collect();
        Ok(Self { spec, bursts })
    }

    pub fn spec(&self) -> &SyntheticWorkloadSpec {
        &self.spec
    }

    /// Arrival rate (requests/second) of stream `idx` at simulation time `t`.
    pub fn intensity(&self, idx: usize, t: SimTime) -> f64 {
        let s = &self.spec.streams[idx];
        let local_ms = self.spec.start_offset as f64
            + t as f64
            + self.spec.region_offsets_hours[s.region.index()] * HOUR as f64;
        let local_ms = local_ms.rem_euclid(7.0 * DAY as f64);
        let hour = (local_ms / HOUR as f64) % 24.0;
        let weekday = (local_ms / DAY as f64).floor() as u64;
        let diurnal =
            1.0 + s.diurnal_amplitude * (2.0 * PI * (hour - self.spec.peak_hour) / 24.0).cos();
        let mut rate = s.base_rps * diurnal;
        if weekday >= 5 {
            rate *= s.weekend_damping;
        }
        if self.bursts[idx]
            .get((t / MINUTE) as usize)
            .copied()
            .unwrap_or(false)
        {
            rate *= s.burst_multiplier;
        }
        for b in &self.spec.scheduled_bursts {
            if b.model.is_none_or(|m| m == s.model) && t >= b.start && t < b.start + b.duration {
                rate *= b.multiplier;
            }
        }
        rate
    }

    fn max_intensity(&self, idx: usize) -> f64 {
        let s = &self.spec.streams[idx];
        let scheduled: f64 = self
            .spec
            .scheduled_bursts
            .iter()
            .filter(|b| b.model.is_none_or(|m| m == s.model))
            .map(|b| b.multiplier.max(1.0))
            .product();
        s.base_rps * (1.0 + s.diurnal_amplitude) * s.burst_multiplier.max(1.0) * scheduled
    }

    /// Integral of the total intensity over the horizon (1 s midpoint rule).
    pub fn expected_count(&self) -> f64 {
        (0..self.spec.streams.len())
            .map(|i| {
                (0..self.spec.duration / SECOND)
                    .map(|s| self.intensity(i, s * SECOND + SECOND / 2))
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn generate(&self, sla: &SlaDefaults) -> Vec<Request> {
        let horizon_s = self.spec.duration as f64 / SECOND as f64;
        let mut arrivals: Vec<(SimTime, usize, u32, u32)> = Vec::new();
        for (idx, s) in self.spec.streams.iter().enumerate() {
            let lam_max = self.max_intensity(idx);
            if lam_max <= 0.0 {
                continue;
            }
            let mut rng = stream_rng(self.spec.seed, idx, 0);
            let gap = Exp::new(lam_max).expect("positive rate");
            let (in_dist, out_dist) = self.spec.tokens[s.model.index()].samplers();
            let mut t = 0.0f64;
            loop {
                t += gap.sample(&mut rng);
                if t >= horizon_s {
                    break;
                }
                let ts = (t * SECOND as f64) as SimTime;
                if rng.random::<f64>() * lam_max >= self.intensity(idx, ts) {
                    continue;
                }
                let clip = |x: f64| x.round().clamp(1.0, MAX_TOKENS) as u32;
                let input = clip(in_dist.sample(&mut rng));
                let output = clip(out_dist.sample(&mut rng));
                arrivals.push((ts, idx, input, output));
            }
        }
        arrivals.sort_by_key(|a| (a.0, a.1));
        arrivals
            .into_iter()
            .enumerate()
            .map(|(id, (ts, idx, input, output))| {
                let s = &self.spec.streams[idx];
                Request::new(id as u64, ts, s.region, s.tier, s.model, input, output, sla)
            })
            .collect()
    }
}

/// Generates the request stream for `spec`, deterministic in `spec.seed`.
pub fn generate_synthetic(
    spec: &SyntheticWorkloadSpec,
    sla: &SlaDefaults,
) -> Result<Vec<Request>, WorkloadError> {
    Ok(SyntheticPlan::new(spec.clone())?.generate(sla))
}
