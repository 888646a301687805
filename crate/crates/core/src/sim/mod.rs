//! Deterministic discrete-event kernel and the instance execution model.

mod engine;
mod event;
mod instance;

pub use engine::{ControlPlane, EndpointCounts, NoControl, Sim};
pub use event::{Event, EventKind, EventQueue};
pub use instance::{kv_footprint, Instance, Phase, PhaseEnd, Slot};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perf::PerfModel;
use crate::routing::{RegionRoutingConfig, SchedulerConfig};
use crate::types::{Catalog, GpuId, SimTime, SlaDefaults, MINUTE, SECOND};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("region {region}: initial fleet of {needed} VMs exceeds capacity limit {limit}")]
    CapacityExceeded {
        region: String,
        needed: u32,
        limit: u32,
    },
    #[error("no performance profile for model {model} on the configured GPU")]
    MissingProfile { model: String },
    #[error("invalid simulation config: {0}")]
    Invalid(String),
}

/// Instance role. `Draining` and `ToSpot` still count as private.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Provisioning,
    Private,
    /// Finishing in-flight work before donation; accepts no new requests.
    Draining,
    /// Private-to-spot switch in progress.
    ToSpot,
    Spot,
}

impl Role {
    pub fn counts_as_private(self) -> bool {
        matches!(self, Role::Private | Role::Draining | Role::ToSpot)
    }
}

/// Instance pool within an endpoint. Unified fleets use `Shared` only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Pool {
    Shared,
    Iw,
    Niw,
}

impl Pool {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Shared => "shared",
            Pool::Iw => "iw",
            Pool::Niw => "niw",
        }
    }
}

/// Where scale-out capacity came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    /// A draining instance of the same endpoint was put back in service.
    Undrain,
    SpotSameModel,
    SpotOtherModel {
        local_weights: bool,
    },
    FreshVm {
        local_weights: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecodeMode {
    /// One event per decode iteration.
    Fine,
    /// One event per run of iterations up to the next completion.
    Coarse,
}

/// Spot reclaim delay: median 1 min, support [0.5, 5] min.
///
/// Half the mass is uniform on [0.5, 1] min; the other half is 1 + 4u² min.
pub fn sample_spot_reclaim<R: Rng + ?Sized>(rng: &mut R) -> SimTime {
    let minutes = if rng.random::<f64>() < 0.5 {
        0.5 + 0.5 * rng.random::<f64>()
    } else {
        let u: f64 = rng.random();
        1.0 + 4.0 * u * u
    };
    (minutes * MINUTE as f64).round() as SimTime
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub catalog: Catalog,
    pub perf: PerfModel,
    pub sla: SlaDefaults,
    /// GPU type of every instance.
    pub gpu: GpuId,
    /// Private instances per (model, region) at time zero.
    pub initial_instances: u32,
    /// When set, each endpoint is split into an IW pool and an NIW pool of
    /// this many instances.
    pub siloed_niw_instances: Option<u32>,
    pub min_per_deployment: u32,
    pub max_per_deployment: u32,
    pub max_deployments_per_endpoint: u32,
    pub sample_period: SimTime,
    pub forecast_period: SimTime,
    pub spot_switch_delay: SimTime,
    pub scheduler: SchedulerConfig,
    pub region_routing: RegionRoutingConfig,
    pub decode_mode: DecodeMode,
    /// End of the trace; forecast ticks stop here.
    pub horizon: SimTime,
    pub seed: u64,
    /// Check memory conservation on every instance after every event.
    pub check_invariants: bool,
    /// Record per-sample utilization series in the ledger.
    pub record_utilization: bool,
}

impl SimConfig {
    pub fn new(catalog: Catalog, perf: PerfModel, gpu: GpuId, horizon: SimTime) -> Self {
        let region_routing = RegionRoutingConfig::from_catalog(&catalog, 0.70);
        Self {
            catalog,
            perf,
            sla: SlaDefaults::default(),
            gpu,
            initial_instances: 20,
            siloed_niw_instances: None,
            min_per_deployment: 2,
            max_per_deployment: 3,
            max_deployments_per_endpoint: 10,
            sample_period: SECOND,
            forecast_period: 60 * MINUTE,
            spot_switch_delay: MINUTE,
            scheduler: SchedulerConfig::default(),
            region_routing,
            decode_mode: DecodeMode::Coarse,
            horizon,
            seed: 0,
            check_invariants: false,
            record_utilization: true,
        }
    }

    /// Minimum private instances per endpoint pool.
    pub fn floor(&self) -> u32 {
        self.min_per_deployment
    }

    /// Maximum instances (private plus provisioning) per endpoint pool.
    pub fn cap(&self) -> u32 {
        self.max_per_deployment * self.max_deployments_per_endpoint
    }

    pub fn pools(&self) -> &'static [Pool] {
        if self.siloed_niw_instances.is_some() {
            &[Pool::Iw, Pool::Niw]
        } else {
            &[Pool::Shared]
        }
    }

    /// Pool serving interactive requests.
    pub fn iw_pool(&self) -> Pool {
        if self.siloed_niw_instances.is_some() {
            Pool::Iw
        } else {
            Pool::Shared
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spot_reclaim_has_one_minute_median_and_five_minute_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut v: Vec<SimTime> = (0..20_001).map(|_| sample_spot_reclaim(&mut rng)).collect();
        v.sort_unstable();
        let median = v[v.len() / 2];
        assert!(
            (median as i64 - MINUTE as i64).abs() < 2 * SECOND as i64,
            "{median}"
        );
        assert!(*v.last().unwrap() <= 5 * MINUTE);
        assert!(*v.first().unwrap() >= 30 * SECOND);
    }
}
