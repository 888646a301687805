//! Shared vocabulary: simulation time, workload tiers, requests and the
//! static catalog of model types, GPU VM types and regions.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time in integer milliseconds since the start of the trace.
pub type SimTime = u64;

pub const SECOND: SimTime = 1_000;
pub const MINUTE: SimTime = 60 * SECOND;
pub const HOUR: SimTime = 60 * MINUTE;
pub const DAY: SimTime = 24 * HOUR;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("request {id}: token counts must be >= 1 (input={input}, output={output})")]
    InvalidTokenCount { id: u64, input: u32, output: u32 },
    #[error("request {id}: {what} deadline precedes arrival")]
    InvalidDeadline { id: u64, what: &'static str },
    #[error("request {id}: priority must be 0 or 1, got {priority}")]
    InvalidPriority { id: u64, priority: u8 },
    #[error("request {id}: lifecycle timestamps out of order")]
    LifecycleOrder { id: u64 },
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown region `{0}`")]
    UnknownRegion(String),
    #[error("unknown gpu type `{0}`")]
    UnknownGpu(String),
    #[error("unknown workload tier `{0}` (expected IW-F, IW-N or NIW)")]
    UnknownTier(String),
    #[error("invalid catalog: {0}")]
    InvalidCatalog(String),
}

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $inner:ty) => {
        $(#[$meta])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}", self.0)
            }
        }
    };
}

id_newtype!(
    /// Index into [`Catalog::models`].
    ModelId,
    u16
);
id_newtype!(
    /// Index into [`Catalog::regions`].
    RegionId,
    u16
);
id_newtype!(
    /// Index into [`Catalog::gpus`].
    GpuId,
    u16
);
id_newtype!(RequestId, u64);
id_newtype!(InstanceId, u32);

/// Workload tier. Interactive tiers carry a TTFT SLA, NIW a completion deadline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tier {
    #[serde(rename = "IW-F")]
    IwFast,
    #[serde(rename = "IW-N")]
    IwNormal,
    #[serde(rename = "NIW")]
    Niw,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::IwFast, Tier::IwNormal, Tier::Niw];

    pub fn is_interactive(self) -> bool {
        !matches!(self, Tier::Niw)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Tier::IwFast => "IW-F",
            Tier::IwNormal => "IW-N",
            Tier::Niw => "NIW",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "IW-F" => Ok(Tier::IwFast),
            "IW-N" => Ok(Tier::IwNormal),
            "NIW" => Ok(Tier::Niw),
            other => Err(DomainError::UnknownTier(other.to_string())),
        }
    }
}

/// SLA values applied when a trace does not carry its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlaDefaults {
    pub iw_fast_ttft: SimTime,
    pub iw_normal_ttft: SimTime,
    pub niw_deadline: SimTime,
    /// Completion deadline for interactive requests. Tracked, never enforced.
    pub iw_completion: SimTime,
}

impl Default for SlaDefaults {
    fn default() -> Self {
        Self {
            iw_fast_ttft: SECOND,
            iw_normal_ttft: MINUTE,
            niw_deadline: DAY,
            iw_completion: DAY,
        }
    }
}

impl SlaDefaults {
    pub fn ttft_sla(&self, tier: Tier) -> Option<SimTime> {
        match tier {
            Tier::IwFast => Some(self.iw_fast_ttft),
            Tier::IwNormal => Some(self.iw_normal_ttft),
            Tier::Niw => None,
        }
    }
}

/// Timestamps filled in as a request moves through the system.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lifecycle {
    /// Arrival at the serving endpoint (after any inter-region hop).
    pub routed_ts: Option<SimTime>,
    /// Admission into an instance batch.
    pub dequeued_ts: Option<SimTime>,
    pub first_token_ts: Option<SimTime>,
    pub completed_ts: Option<SimTime>,
}

/// One inference request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: RequestId,
    pub arrival_ts: SimTime,
    pub client_region: RegionId,
    pub tier: Tier,
    pub model: ModelId,
    pub input_tokens: u32,
    pub output_tokens: u32,
    /// Absolute TTFT deadline; `None` for NIW.
    pub ttft_deadline: Option<SimTime>,
    pub completion_deadline: SimTime,
    /// 0 = interactive-equivalent, 1 = deferred NIW.
    pub priority: u8,
    pub lifecycle: Lifecycle,
}

impl Request {
    /// Builds a request with deadlines and priority derived from `sla`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u64,
        arrival_ts: SimTime,
        client_region: RegionId,
        tier: Tier,
        model: ModelId,
        input_tokens: u32,
        output_tokens: u32,
        sla: &SlaDefaults,
    ) -> Self {
        let (ttft_deadline, completion_deadline, priority) = match tier {
            Tier::Niw => (None, arrival_ts + sla.niw_deadline, 1),
            iw => (
                sla.ttft_sla(iw).map(|d| arrival_ts + d),
                arrival_ts + sla.iw_completion,
                0,
            ),
        };
        Self {
            id: RequestId(id),
            arrival_ts,
            client_region,
            tier,
            model,
            input_tokens,
            output_tokens,
            ttft_deadline,
            completion_deadline,
            priority,
            lifecycle: Lifecycle::default(),
        }
    }

    /// Remaining time until the TTFT deadline (negative once expired). NIW
    /// requests use their completion deadline as the surrogate.
    pub fn remaining_ttft(&self, now: SimTime) -> i64 {
        let deadline = self.ttft_deadline.unwrap_or(self.completion_deadline);
        deadline as i64 - now as i64
    }

    pub fn ttft(&self) -> Option<SimTime> {
        self.lifecycle.first_token_ts.map(|t| t - self.arrival_ts)
    }

    pub fn e2e(&self) -> Option<SimTime> {
        self.lifecycle.completed_ts.map(|t| t - self.arrival_ts)
    }
}

/// Checks every [`Request`] invariant against the catalog.
pub fn validate_request(r: &Request, catalog: &Catalog) -> Result<(), DomainError> {
    let id = r.id.0;
    if r.input_tokens == 0 || r.output_tokens == 0 {
        return Err(DomainError::InvalidTokenCount {
            id,
            input: r.input_tokens,
            output: r.output_tokens,
        });
    }
    if r.model.index() >= catalog.models.len() {
        return Err(DomainError::UnknownModel(r.model.to_string()));
    }
    if r.client_region.index() >= catalog.regions.len() {
        return Err(DomainError::UnknownRegion(r.client_region.to_string()));
    }
    if r.tier.is_interactive() {
        match r.ttft_deadline {
            Some(d) if d >= r.arrival_ts => {}
            _ => return Err(DomainError::InvalidDeadline { id, what: "TTFT" }),
        }
    }
    if r.completion_deadline < r.arrival_ts {
        return Err(DomainError::InvalidDeadline {
            id,
            what: "completion",
        });
    }
    if r.priority > 1 {
        return Err(DomainError::InvalidPriority {
            id,
            priority: r.priority,
        });
    }
    if r.tier.is_interactive() && r.priority != 0 {
        return Err(DomainError::InvalidPriority {
            id,
            priority: r.priority,
        });
    }
    let lc = &r.lifecycle;
    let mut last = r.arrival_ts;
    for ts in [
        lc.routed_ts,
        lc.dequeued_ts,
        lc.first_token_ts,
        lc.completed_ts,
    ]
    .into_iter()
    .flatten()
    {
        if ts < last {
            return Err(DomainError::LifecycleOrder { id });
        }
        last = ts;
    }
    Ok(())
}

/// One uniform latency band inside a [`LatencyDist::Mixture`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBand {
    pub weight: f64,
    pub lo_ms: u64,
    pub hi_ms: u64,
}

/// Network latency between a client region and a serving region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LatencyDist {
    Fixed(u64),
    Mixture(Vec<LatencyBand>),
}

impl LatencyDist {
    /// Inter-region default: mostly ~50 ms, a 10% tail up to 500 ms and 2% at 2.5 s.
    pub fn inter_region_default() -> Self {
        LatencyDist::Mixture(vec![
            LatencyBand {
                weight: 0.88,
                lo_ms: 30,
                hi_ms: 70,
            },
            LatencyBand {
                weight: 0.10,
                lo_ms: 70,
                hi_ms: 500,
            },
            LatencyBand {
                weight: 0.02,
                lo_ms: 2_500,
                hi_ms: 2_500,
            },
        ])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SimTime {
        match self {
            LatencyDist::Fixed(ms) => *ms,
            LatencyDist::Mixture(bands) => {
                let total: f64 = bands.iter().map(|b| b.weight).sum();
                let mut pick = rng.random::<f64>() * total;
                let band = bands
                    .iter()
                    .find(|b| {
                        pick -= b.weight;
                        pick < 0.0
                    })
                    .or(bands.last())
                    .expect("mixture has at least one band");
                if band.hi_ms <= band.lo_ms {
                    band.lo_ms
                } else {
                    rng.random_range(band.lo_ms..=band.hi_ms)
                }
            }
        }
    }

    fn is_non_negative(&self) -> bool {
        match self {
            LatencyDist::Fixed(_) => true,
            LatencyDist::Mixture(b) => !b.is_empty() && b.iter().all(|b| b.weight >= 0.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelType {
    pub name: String,
    pub weights_bytes: u64,
    pub gpus_per_instance: u32,
    pub local_deploy_delay: SimTime,
    pub remote_deploy_delay: SimTime,
    /// Regions whose local repository caches this model's weights.
    pub weight_locality: BTreeSet<RegionId>,
    /// KV-cache bytes per resident token.
    pub kv_bytes_per_token: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpuType {
    pub name: String,
    pub vm_total_memory_bytes: u64,
    /// Hourly VM cost.
    pub hourly_cost: f64,
    pub vm_acquire_delay: SimTime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: String,
    /// Latency from this region (as client) to every region, indexed by `RegionId`.
    pub latency: Vec<LatencyDist>,
    /// Maximum concurrent GPU VMs (private, provisioning and spot).
    pub capacity_limit: u32,
}

/// The static world: every model type, GPU VM type and region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub models: Vec<ModelType>,
    pub gpus: Vec<GpuType>,
    pub regions: Vec<Region>,
}

const GB: u64 = 1_000_000_000;

/// KV bytes per token such that three 8k-token requests fill a quarter of the
/// effective (post-weights) memory.
pub fn default_kv_bytes_per_token(vm_memory: u64, weights: u64) -> u64 {
    (vm_memory - weights) / (4 * 3 * 8_192)
}

impl Catalog {
    /// Three US regions, four open models, two 8-GPU VM types.
    pub fn desk_scale() -> Self {
        let regions: Vec<Region> = ["us-east", "us-central", "us-west"]
            .iter()
            .enumerate()
            .map(|(i, name)| Region {
                name: name.to_string(),
                latency: (0..3)
                    .map(|j| {
                        if i == j {
                            LatencyDist::Fixed(0)
                        } else {
                            LatencyDist::inter_region_default()
                        }
                    })
                    .collect(),
                capacity_limit: 160,
            })
            .collect();
        let gpus = vec![
            GpuType {
                name: "a100x8".into(),
                vm_total_memory_bytes: 640 * GB,
                hourly_cost: 32.77,
                vm_acquire_delay: 3 * MINUTE,
            },
            GpuType {
                name: "h100x8".into(),
                vm_total_memory_bytes: 640 * GB,
                hourly_cost: 98.32,
                vm_acquire_delay: 3 * MINUTE,
            },
        ];
        let all_regions: BTreeSet<RegionId> = (0..3).map(RegionId).collect();
        let models = [
            ("bloom-176b", 352 * GB),
            ("llama2-70b", 140 * GB),
            ("llama3.1-8b", 16 * GB),
            ("llama3.2-3b", 7 * GB),
        ]
        .into_iter()
        .map(|(name, weights)| ModelType {
            name: name.into(),
            weights_bytes: weights,
            gpus_per_instance: 8,
            local_deploy_delay: 10 * MINUTE,
            remote_deploy_delay: 2 * HOUR,
            weight_locality: all_regions.clone(),
            kv_bytes_per_token: default_kv_bytes_per_token(640 * GB, weights),
        })
        .collect();
        Self {
            models,
            gpus,
            regions,
        }
    }

    pub fn model_id(&self, name: &str) -> Result<ModelId, DomainError> {
        self.models
            .iter()
            .position(|m| m.name == name)
            .map(|i| ModelId(i as u16))
            .ok_or_else(|| DomainError::UnknownModel(name.to_string()))
    }

    pub fn region_id(&self, name: &str) -> Result<RegionId, DomainError> {
        self.regions
            .iter()
            .position(|r| r.name == name)
            .map(|i| RegionId(i as u16))
            .ok_or_else(|| DomainError::UnknownRegion(name.to_string()))
    }

    pub fn gpu_id(&self, name: &str) -> Result<GpuId, DomainError> {
        self.gpus
            .iter()
            .position(|g| g.name == name)
            .map(|i| GpuId(i as u16))
            .ok_or_else(|| DomainError::UnknownGpu(name.to_string()))
    }

    pub fn model(&self, id: ModelId) -> &ModelType {
        &self.models[id.index()]
    }

    pub fn gpu(&self, id: GpuId) -> &GpuType {
        &self.gpus[id.index()]
    }

    pub fn region(&self, id: RegionId) -> &Region {
        &self.regions[id.index()]
    }

    pub fn model_ids(&self) -> impl Iterator<Item = ModelId> {
        (0..self.models.len() as u16).map(ModelId)
    }

    pub fn region_ids(&self) -> impl Iterator<Item = RegionId> {
        (0..self.regions.len() as u16).map(RegionId)
    }

    pub fn gpu_ids(&self) -> impl Iterator<Item = GpuId> {
        (0..self.gpus.len() as u16).map(GpuId)
    }

    /// Effective KV memory of one instance: VM memory minus model weights.
    pub fn effective_capacity(&self, model: ModelId, gpu: GpuId) -> u64 {
        self.gpu(gpu)
            .vm_total_memory_bytes
            .saturating_sub(self.model(model).weights_bytes)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        let bad = |msg: String| Err(DomainError::InvalidCatalog(msg));
        for g in &self.gpus {
            if !(g.hourly_cost > 0.0) {
                return bad(format!("gpu {} has non-positive hourly cost", g.name));
            }
        }
        for m in &self.models {
            if m.local_deploy_delay == 0 || m.remote_deploy_delay == 0 {
                return bad(format!("model {} has zero deploy delay", m.name));
            }
            if m.kv_bytes_per_token == 0 {
                return bad(format!("model {} has zero KV bytes per token", m.name));
            }
            for g in &self.gpus {
                if m.weights_bytes >= g.vm_total_memory_bytes {
                    return bad(format!("model {} does not fit on {}", m.name, g.name));
                }
            }
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.latency.len() != self.regions.len() {
                return bad(format!("region {} latency table has wrong arity", r.name));
            }
            if r.latency[i] != LatencyDist::Fixed(0) {
                return bad(format!("region {} latency to itself must be 0", r.name));
            }
            if !r.latency.iter().all(LatencyDist::is_non_negative) {
                return bad(format!(
                    "region {} has a malformed latency distribution",
                    r.name
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn catalog() -> Catalog {
        Catalog::desk_scale()
    }

    #[test]
    fn well_formed_iw_fast_request_is_valid() {
        let c = catalog();
        let r = Request::new(
            1,
            0,
            RegionId(0),
            Tier::IwFast,
            ModelId(1),
            100,
            50,
            &SlaDefaults::default(),
        );
        assert_eq!(r.ttft_deadline, Some(1_000));
        assert!(validate_request(&r, &c).is_ok());
    }

    #[test]
    fn zero_input_tokens_rejected() {
        let c = catalog();
        let r = Request::new(
            2,
            0,
            RegionId(0),
            Tier::Niw,
            ModelId(0),
            0,
            50,
            &SlaDefaults::default(),
        );
        assert!(matches!(
            validate_request(&r, &c),
            Err(DomainError::InvalidTokenCount { .. })
        ));
    }

    #[test]
    fn ttft_deadline_before_arrival_rejected() {
        let c = catalog();
        let mut r = Request::new(
            3,
            5_000,
            RegionId(0),
            Tier::IwNormal,
            ModelId(0),
            10,
            10,
            &SlaDefaults::default(),
        );
        r.ttft_deadline = Some(4_000);
        assert!(matches!(
            validate_request(&r, &c),
            Err(DomainError::InvalidDeadline { .. })
        ));
    }

    #[test]
    fn unknown_model_and_region_rejected() {
        let c = catalog();
        let mut r = Request::new(
            4,
            0,
            RegionId(0),
            Tier::IwFast,
            ModelId(9),
            10,
            10,
            &SlaDefaults::default(),
        );
        assert!(matches!(
            validate_request(&r, &c),
            Err(DomainError::UnknownModel(_))
        ));
        r.model = ModelId(0);
        r.client_region = RegionId(7);
        assert!(matches!(
            validate_request(&r, &c),
            Err(DomainError::UnknownRegion(_))
        ));
    }

    #[test]
    fn niw_starts_at_priority_one_iw_at_zero() {
        let sla = SlaDefaults::default();
        let niw = Request::new(5, 10, RegionId(0), Tier::Niw, ModelId(0), 1, 1, &sla);
        let iw = Request::new(6, 10, RegionId(0), Tier::IwNormal, ModelId(0), 1, 1, &sla);
        assert_eq!(niw.priority, 1);
        assert_eq!(niw.completion_deadline, 10 + DAY);
        assert_eq!(niw.remaining_ttft(10), DAY as i64);
        assert_eq!(iw.priority, 0);
        assert_eq!(iw.remaining_ttft(70_010), -10_000);
    }

    #[test]
    fn lifecycle_order_is_checked() {
        let c = catalog();
        let mut r = Request::new(
            7,
            100,
            RegionId(0),
            Tier::IwFast,
            ModelId(0),
            1,
            1,
            &SlaDefaults::default(),
        );
        r.lifecycle.routed_ts = Some(120);
        r.lifecycle.first_token_ts = Some(110);
        assert!(matches!(
            validate_request(&r, &c),
            Err(DomainError::LifecycleOrder { .. })
        ));
    }

    #[test]
    fn tiers_parse_and_unknown_is_rejected() {
        for t in Tier::ALL {
            assert_eq!(t.as_str().parse::<Tier>().unwrap(), t);
        }
        assert!("batch".parse::<Tier>().is_err());
    }

    #[test]
    fn desk_scale_catalog_is_valid_and_kv_sized() {
        let c = catalog();
        c.validate().unwrap();
        let m = c.model_id("llama2-70b").unwrap();
        let g = c.gpu_id("a100x8").unwrap();
        let eff = c.effective_capacity(m, g);
        let batch = 3 * 8_192 * c.model(m).kv_bytes_per_token;
        let frac = batch as f64 / eff as f64;
        assert!((frac - 0.25).abs() < 1e-3, "{frac}");
    }
}
