use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::event::{EventKind, EventQueue};
use super::instance::{Instance, Phase, PhaseEnd};
use super::{sample_spot_reclaim, DecodeMode, Pool, Role, SimConfig, SimError, Source};
use crate::metrics::{
    CountChange, InstanceRecord, MetricsLedger, ProvisioningRecord, RequestRecord, RoleInterval,
    RoleKind, ScaleAction, ScaleEvent, UtilSeries,
};
use crate::perf::PairProfile;
use crate::routing::{
    argmin_by, partition_deployments, route_global_iw, route_to_instance, QueueKey,
};
use crate::types::{InstanceId, ModelId, RegionId, Request, SimTime, Tier, DAY};

/// Hooks through which scaling, NIW deferral and forecasting drive the
/// simulation. Every hook runs synchronously inside the event loop.
pub trait ControlPlane {
    fn on_start(&mut self, _sim: &mut Sim) {}

    /// Called once per request when it reaches its client region.
    fn on_arrival(&mut self, sim: &mut Sim, req: u32) {
        sim.route_default(req);
    }

    /// Called after a request joins an instance queue or an endpoint backlog.
    fn on_landing(&mut self, _sim: &mut Sim, _model: ModelId, _region: RegionId, _pool: Pool) {}

    fn on_sample(&mut self, _sim: &mut Sim) {}

    fn on_forecast_tick(&mut self, _sim: &mut Sim) {}

    fn on_timer(&mut self, _sim: &mut Sim, _tag: u64) {}

    fn on_trace_end(&mut self, _sim: &mut Sim) {}
}

/// Static fleet: default routing, no scaling.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoControl;

impl ControlPlane for NoControl {}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EndpointCounts {
    pub active: u32,
    pub provisioning: u32,
    pub draining: u32,
}

impl EndpointCounts {
    /// Instances serving now or committed to serve soon.
    pub fn committed(&self) -> u32 {
        self.active + self.provisioning
    }
}

#[derive(Debug, Default)]
struct Endpoint {
    /// Accepting instances, sorted by id.
    active: Vec<InstanceId>,
    draining: Vec<InstanceId>,
    provisioning: u32,
    backlog: VecDeque<u32>,
}

struct OpenInterval {
    role: RoleKind,
    model: ModelId,
    start: SimTime,
}

/// Request state beyond the immutable trace record.
#[derive(Clone, Copy, Default)]
struct Served {
    region: Option<RegionId>,
    instance: Option<InstanceId>,
    queued_priority: Option<u8>,
}

pub struct Sim<'a> {
    cfg: &'a SimConfig,
    now: SimTime,
    events: EventQueue,
    reqs: Vec<Request>,
    served: Vec<Served>,
    instances: Vec<Instance>,
    inst_records: Vec<InstanceRecord>,
    open: Vec<Option<OpenInterval>>,
    provisioning_start: Vec<Option<(SimTime, Source)>>,
    endpoints: Vec<Endpoint>,
    spot: Vec<Vec<InstanceId>>,
    region_total: Vec<u32>,
    profiles: Vec<PairProfile>,
    latency_rng: ChaCha8Rng,
    spot_rng: ChaCha8Rng,
    ledger: MetricsLedger,
    pending_landings: Vec<(ModelId, RegionId, Pool)>,
    completed: usize,
    trace_ended: bool,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, mut reqs: Vec<Request>) -> Result<Self, SimError> {
        let cat = &cfg.catalog;
        let (nm, nr) = (cat.models.len(), cat.regions.len());
        if cfg.min_per_deployment == 0 || cfg.max_per_deployment < cfg.min_per_deployment {
            return Err(SimError::Invalid(
                "need 0 < min_per_deployment <= max_per_deployment".into(),
            ));
        }
        if let Some(niw) = cfg.siloed_niw_instances {
            if niw >= cfg.initial_instances {
                return Err(SimError::Invalid(
                    "NIW pool must be smaller than the initial fleet".into(),
                ));
            }
        }
        let profiles = cat
            .model_ids()
            .map(|m| {
                cfg.perf
                    .profile(m, cfg.gpu)
                    .cloned()
                    .map_err(|_| SimError::MissingProfile {
                        model: cat.model(m).name.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        reqs.sort_by_key(|r| r.arrival_ts);
        let mut sim = Sim {
            cfg,
            now: 0,
            events: EventQueue::default(),
            served: vec![Served::default(); reqs.len()],
            reqs,
            instances: Vec::new(),
            inst_records: Vec::new(),
            open: Vec::new(),
            provisioning_start: Vec::new(),
            endpoints: (0..nm * nr * 3).map(|_| Endpoint::default()).collect(),
            spot: vec![Vec::new(); nr],
            region_total: vec![0; nr],
            profiles,
            latency_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c61_7465_6e63_7900),
            spot_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7370_6f74_0000_0000),
            ledger: MetricsLedger {
                sample_period: cfg.sample_period,
                horizon: cfg.horizon,
                ..Default::default()
            },
            pending_landings: Vec::new(),
            completed: 0,
            trace_ended: false,
        };
        for r in cat.region_ids() {
            let needed = cfg.initial_instances * nm as u32;
            let limit = cat.region(r).capacity_limit;
            if needed > limit {
                return Err(SimError::CapacityExceeded {
                    region: cat.region(r).name.clone(),
                    needed,
                    limit,
                });
            }
            for m in cat.model_ids() {
                let split: Vec<(Pool, u32)> = match cfg.siloed_niw_instances {
                    Some(niw) => vec![(Pool::Iw, cfg.initial_instances - niw), (Pool::Niw, niw)],
                    None => vec![(Pool::Shared, cfg.initial_instances)],
                };
                for (pool, n) in split {
                    for _ in 0..n {
                        let id = sim.new_instance(m, r, pool, Role::Private);
                        sim.open_interval(id, RoleKind::Private);
                        sim.count_change(m, r, 1);
                        let ep = sim.ep(m, r, pool);
                        sim.endpoints[ep].active.push(id);
                    }
                }
            }
        }
        if cfg.record_utilization {
            for m in cat.model_ids() {
                for r in cat.region_ids() {
                    for &pool in cfg.pools() {
                        sim.ledger.utilization.push(UtilSeries {
                            model: m,
                            region: r,
                            pool,
                            values: Vec::new(),
                        });
                    }
                }
            }
        }
        Ok(sim)
    }

    /// Runs `requests` to completion under `control`.
    pub fn run<C: ControlPlane + ?Sized>(
        cfg: &SimConfig,
        requests: Vec<Request>,
        control: &mut C,
    ) -> Result<MetricsLedger, SimError> {
        let mut sim = Sim::new(cfg, requests)?;
        control.on_start(&mut sim);
        sim.notify_landings(control);
        if !sim.reqs.is_empty() {
            sim.events
                .push(sim.reqs[0].arrival_ts, EventKind::RequestArrival { req: 0 });
        }
        sim.events
            .push(cfg.sample_period, EventKind::UtilizationSample);
        if cfg.forecast_period < cfg.horizon {
            sim.events
                .push(cfg.forecast_period, EventKind::ForecastTick);
        }
        sim.events.push(cfg.horizon, EventKind::TraceEnd);
        while let Some(ev) = sim.events.pop() {
            sim.now = ev.fire_ts;
            match ev.kind {
                EventKind::RequestArrival { req } => {
                    let next = req as usize + 1;
                    if next < sim.reqs.len() {
                        sim.events.push(
                            sim.reqs[next].arrival_ts,
                            EventKind::RequestArrival { req: next as u32 },
                        );
                    }
                    control.on_arrival(&mut sim, req);
                }
                EventKind::RequestLanded { req, region, pool } => sim.land(req, region, pool),
                EventKind::TokenEmitted { inst, epoch }
                | EventKind::BatchComplete { inst, epoch } => {
                    if sim.instances[inst.index()].epoch == epoch {
                        sim.phase_end(inst);
                    }
                }
                EventKind::ProvisioningDone { inst } => sim.provisioning_done(inst),
                EventKind::SpotSwitchDone { inst } => sim.spot_switch_done(inst),
                EventKind::ScalerTick { tag } => control.on_timer(&mut sim, tag),
                EventKind::ForecastTick => {
                    control.on_forecast_tick(&mut sim);
                    let next = sim.now + cfg.forecast_period;
                    if next < cfg.horizon {
                        sim.events.push(next, EventKind::ForecastTick);
                    }
                }
                EventKind::UtilizationSample => {
                    sim.record_sample();
                    control.on_sample(&mut sim);
                    let unfinished = sim.completed < sim.reqs.len();
                    let give_up = sim.now > cfg.horizon + 7 * DAY;
                    if (!sim.trace_ended || unfinished) && !give_up {
                        sim.events
                            .push(sim.now + cfg.sample_period, EventKind::UtilizationSample);
                    }
                }
                EventKind::TraceEnd => {
                    sim.trace_ended = true;
                    control.on_trace_end(&mut sim);
                }
            }
            sim.notify_landings(control);
            if cfg.check_invariants {
                sim.check_memory();
            }
        }
        Ok(sim.finish())
    }

    fn notify_landings<C: ControlPlane + ?Sized>(&mut self, control: &mut C) {
        while !self.pending_landings.is_empty() {
            let pending = std::mem::take(&mut self.pending_landings);
            for (m, r, p) in pending {
                control.on_landing(self, m, r, p);
            }
        }
    }

    // ---- read access for control planes ----

    pub fn cfg(&self) -> &'a SimConfig {
        self.cfg
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn request(&self, idx: u32) -> &Request {
        &self.reqs[idx as usize]
    }

    pub fn num_requests(&self) -> usize {
        self.reqs.len()
    }

    pub fn trace_ended(&self) -> bool {
        self.trace_ended
    }

    pub fn ledger_mut(&mut self) -> &mut MetricsLedger {
        &mut self.ledger
    }

    pub fn set_priority(&mut self, idx: u32, priority: u8) {
        self.reqs[idx as usize].priority = priority;
    }

    pub fn schedule_timer(&mut self, at: SimTime, tag: u64) {
        self.events
            .push(at.max(self.now), EventKind::ScalerTick { tag });
    }

    fn ep(&self, model: ModelId, region: RegionId, pool: Pool) -> usize {
        (model.index() * self.cfg.catalog.regions.len() + region.index()) * 3 + pool.index()
    }

    pub fn counts(&self, model: ModelId, region: RegionId, pool: Pool) -> EndpointCounts {
        let e = &self.endpoints[self.ep(model, region, pool)];
        EndpointCounts {
            active: e.active.len() as u32,
            provisioning: e.provisioning,
            draining: e.draining.len() as u32,
        }
    }

    pub fn backlog_len(&self, model: ModelId, region: RegionId, pool: Pool) -> usize {
        self.endpoints[self.ep(model, region, pool)].backlog.len()
    }

    fn util_of(&self, ids: &[InstanceId]) -> Option<f64> {
        if ids.is_empty() {
            return None;
        }
        let (mut used, mut cap) = (0u64, 0u64);
        for id in ids {
            let i = &self.instances[id.index()];
            used += i.used_tokens_at(self.now);
            cap += i.capacity_tokens;
        }
        Some(used as f64 / cap as f64)
    }

    /// Effective memory utilization of the endpoint's accepting instances.
    pub fn utilization(&self, model: ModelId, region: RegionId, pool: Pool) -> Option<f64> {
        self.util_of(&self.endpoints[self.ep(model, region, pool)].active)
    }

    /// Aggregated utilization of `model` across all regions for `pool`.
    pub fn model_utilization(&self, model: ModelId, pool: Pool) -> Option<f64> {
        let ids: Vec<InstanceId> = self
            .cfg
            .catalog
            .region_ids()
            .flat_map(|r| {
                self.endpoints[self.ep(model, r, pool)]
                    .active
                    .iter()
                    .copied()
            })
            .collect();
        self.util_of(&ids)
    }

    pub fn instance(&self, id: InstanceId) -> &Instance {
        &self.instances[id.index()]
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn region_total(&self, region: RegionId) -> u32 {
        self.region_total[region.index()]
    }

    /// Single-request service time on an idle instance.
    pub fn estimate_service(&self, model: ModelId, input: u32, output: u32) -> SimTime {
        let p = &self.profiles[model.index()];
        let prefill = p.prefill(input as f64).ms;
        let decode =
            p.decode(1.0, input as f64 + output as f64 / 2.0).ms * output.saturating_sub(1) as f64;
        (prefill + decode).round() as SimTime
    }

    // ---- routing ----

    /// Interactive requests go through global region routing; NIW goes to
    /// the client region's NIW pool when siloed.
    pub fn route_default(&mut self, req: u32) {
        let r = &self.reqs[req as usize];
        if r.tier == Tier::Niw && self.cfg.siloed_niw_instances.is_some() {
            let region = r.client_region;
            self.dispatch(req, region, Pool::Niw);
        } else {
            self.route_iw(req);
        }
    }

    /// Picks a region by utilization threshold and preference order, then
    /// dispatches there.
    pub fn route_iw(&mut self, req: u32) {
        let pool = self.cfg.iw_pool();
        let (model, client) = (
            self.reqs[req as usize].model,
            self.reqs[req as usize].client_region,
        );
        let utils: Vec<Option<f64>> = self
            .cfg
            .catalog
            .region_ids()
            .map(|r| self.utilization(model, r, pool))
            .collect();
        let rc = &self.cfg.region_routing;
        let region = route_global_iw(
            &utils,
            &rc.preference[client.index()],
            rc.utilization_threshold,
        )
        .unwrap_or(client);
        self.dispatch(req, region, pool);
    }

    /// Sends a request to `region`'s endpoint, paying the network hop from its
    /// client region.
    pub fn dispatch(&mut self, req: u32, region: RegionId, pool: Pool) {
        let client = self.reqs[req as usize].client_region;
        let latency =
            self.cfg.catalog.region(client).latency[region.index()].sample(&mut self.latency_rng);
        if latency == 0 {
            self.land(req, region, pool);
        } else {
            self.events.push(
                self.now + latency,
                EventKind::RequestLanded { req, region, pool },
            );
        }
    }

    fn land(&mut self, req: u32, region: RegionId, pool: Pool) {
        let r = &mut self.reqs[req as usize];
        r.lifecycle.routed_ts.get_or_insert(self.now);
        let model = r.model;
        self.served[req as usize].region = Some(region);
        self.pending_landings.push((model, region, pool));
        let ep = self.ep(model, region, pool);
        if self.endpoints[ep].active.is_empty() {
            self.endpoints[ep].backlog.push_back(req);
            self.ledger.counters.backlogged += 1;
            return;
        }
        let inst = self.pick_instance(ep);
        self.enqueue(inst, req);
    }

    /// Least-utilized deployment, then shortest queue within it.
    fn pick_instance(&self, ep: usize) -> InstanceId {
        let active = &self.endpoints[ep].active;
        let groups = partition_deployments(active.len(), self.cfg.max_per_deployment as usize);
        let utils = groups
            .iter()
            .map(|g| self.util_of(&active[g.clone()]).unwrap_or(0.0));
        let g = groups[argmin_by(utils).expect("non-empty endpoint")].clone();
        route_to_instance(
            active[g]
                .iter()
                .map(|&id| (id, self.instances[id.index()].remaining_tokens(self.now))),
        )
        .expect("non-empty deployment")
    }

    fn enqueue(&mut self, inst: InstanceId, req: u32) {
        let r = &self.reqs[req as usize];
        let key = QueueKey {
            idx: req,
            arrival_ts: r.arrival_ts,
            tier: r.tier,
            priority: r.priority,
            deadline: r.ttft_deadline.unwrap_or(r.completion_deadline),
            input_tokens: r.input_tokens,
            output_tokens: r.output_tokens,
        };
        let s = &mut self.served[req as usize];
        s.instance = Some(inst);
        s.queued_priority = Some(r.priority);
        self.instances[inst.index()].enqueue(key);
        self.kick(inst);
    }

    // ---- execution ----

    fn kick(&mut self, id: InstanceId) {
        let fine = self.cfg.decode_mode == DecodeMode::Fine;
        let i = &mut self.instances[id.index()];
        if !matches!(i.role, Role::Private | Role::Draining) {
            return;
        }
        match i.phase {
            Phase::Idle => self.start_next(id),
            Phase::Decode { .. } if !fine && i.can_admit() => {
                if let Some(end) = i.truncate_run(self.now) {
                    let epoch = i.epoch;
                    self.events
                        .push(end, EventKind::BatchComplete { inst: id, epoch });
                }
            }
            _ => {}
        }
    }

    fn start_next(&mut self, id: InstanceId) {
        let now = self.now;
        let fine = self.cfg.decode_mode == DecodeMode::Fine;
        let sched = self.cfg.scheduler;
        let i = &mut self.instances[id.index()];
        let profile = &self.profiles[i.model.index()];
        let (admitted, oversize) = i.admit(now, &sched);
        if admitted > 0 {
            let from = i.running.len() - admitted;
            for s in &i.running[from..] {
                self.reqs[s.idx as usize].lifecycle.dequeued_ts = Some(now);
            }
            let (end, extrapolated) = i.start_prefill(now, from, profile);
            let epoch = i.epoch;
            self.ledger.counters.oversize_admissions += u64::from(oversize);
            self.ledger.counters.perf_extrapolation += u64::from(extrapolated);
            self.events
                .push(end, EventKind::TokenEmitted { inst: id, epoch });
        } else if !i.running.is_empty() {
            // Head-of-line blocking under a time-varying order is re-checked
            // every iteration.
            let single = fine || i.blocked_fit();
            let (end, extrapolated) = i.start_decode(now, profile, single);
            let epoch = i.epoch;
            self.ledger.counters.perf_extrapolation += extrapolated;
            let kind = if fine {
                EventKind::TokenEmitted { inst: id, epoch }
            } else {
                EventKind::BatchComplete { inst: id, epoch }
            };
            self.events.push(end, kind);
        } else if i.role == Role::Draining && i.queue.is_empty() {
            self.begin_spot_switch(id);
        }
    }

    fn phase_end(&mut self, id: InstanceId) {
        let i = &mut self.instances[id.index()];
        let out: PhaseEnd = match i.phase {
            Phase::Prefill { .. } => i.finish_prefill(),
            Phase::Decode { .. } => i.finish_decode(),
            Phase::Idle => return,
        };
        for idx in out.first_token {
            self.reqs[idx as usize].lifecycle.first_token_ts = Some(self.now);
        }
        for idx in out.completed {
            self.reqs[idx as usize].lifecycle.completed_ts = Some(self.now);
            self.completed += 1;
        }
        self.start_next(id);
    }

    // ---- fleet bookkeeping ----

    fn new_instance(
        &mut self,
        model: ModelId,
        region: RegionId,
        pool: Pool,
        role: Role,
    ) -> InstanceId {
        let id = InstanceId(self.instances.len() as u32);
        let cap = self.capacity_tokens(model);
        self.instances.push(Instance::new(
            id,
            model,
            self.cfg.gpu,
            region,
            pool,
            role,
            cap,
        ));
        self.inst_records.push(InstanceRecord {
            id,
            gpu: self.cfg.gpu,
            region,
            pool,
            gpus: self.cfg.catalog.model(model).gpus_per_instance,
            intervals: Vec::new(),
        });
        self.open.push(None);
        self.provisioning_start.push(None);
        self.region_total[region.index()] += 1;
        id
    }

    fn capacity_tokens(&self, model: ModelId) -> u64 {
        let cat = &self.cfg.catalog;
        cat.effective_capacity(model, self.cfg.gpu) / cat.model(model).kv_bytes_per_token
    }

    fn open_interval(&mut self, id: InstanceId, role: RoleKind) {
        self.close_interval(id);
        let model = self.instances[id.index()].model;
        self.open[id.index()] = Some(OpenInterval {
            role,
            model,
            start: self.now,
        });
    }

    fn close_interval(&mut self, id: InstanceId) {
        if let Some(o) = self.open[id.index()].take() {
            self.inst_records[id.index()].intervals.push(RoleInterval {
                model: o.model,
                role: o.role,
                start: o.start,
                end: self.now,
            });
        }
    }

    fn count_change(&mut self, model: ModelId, region: RegionId, delta: i32) {
        self.ledger.count_changes.push(CountChange {
            ts: self.now,
            model,
            region,
            delta,
        });
    }

    fn log_scale(&mut self, model: ModelId, region: RegionId, pool: Pool, action: ScaleAction) {
        let count_after = self.counts(model, region, pool).committed();
        self.ledger.scale_events.push(ScaleEvent {
            ts: self.now,
            model,
            region,
            pool,
            action,
            count_after,
            target: None,
            ratio: None,
        });
    }

    /// Adds one instance to the endpoint pool. Sourcing order: a draining
    /// instance of the same pool, same-model spot, other-model spot, a fresh VM.
    pub fn scale_out(&mut self, model: ModelId, region: RegionId, pool: Pool) -> Option<Source> {
        let ep = self.ep(model, region, pool);
        let counts = self.counts(model, region, pool);
        if counts.committed() >= self.cfg.cap() {
            self.log_scale(model, region, pool, ScaleAction::NoCapacity);
            return None;
        }
        if let Some(id) = self.endpoints[ep].draining.first().copied() {
            self.endpoints[ep].draining.remove(0);
            self.instances[id.index()].role = Role::Private;
            self.activate(ep, id);
            self.log_scale(model, region, pool, ScaleAction::Out(Source::Undrain));
            return Some(Source::Undrain);
        }
        let cfg = self.cfg;
        let cat = &cfg.catalog;
        let local = cat.model(model).weight_locality.contains(&region);
        let deploy = if local {
            cat.model(model).local_deploy_delay
        } else {
            cat.model(model).remote_deploy_delay
        };
        let spot = &self.spot[region.index()];
        let same = spot
            .iter()
            .position(|&id| self.instances[id.index()].model == model);
        let (id, source, delay) = if let Some(pos) = same {
            let id = self.spot[region.index()].remove(pos);
            (
                id,
                Source::SpotSameModel,
                sample_spot_reclaim(&mut self.spot_rng),
            )
        } else if !spot.is_empty() {
            let id = self.spot[region.index()].remove(0);
            let reclaim = sample_spot_reclaim(&mut self.spot_rng);
            (
                id,
                Source::SpotOtherModel {
                    local_weights: local,
                },
                reclaim + deploy,
            )
        } else if self.region_total[region.index()] < cat.region(region).capacity_limit {
            let acquire = cat.gpu(cfg.gpu).vm_acquire_delay;
            let id = self.new_instance(model, region, pool, Role::Provisioning);
            (
                id,
                Source::FreshVm {
                    local_weights: local,
                },
                acquire + deploy,
            )
        } else {
            self.log_scale(model, region, pool, ScaleAction::NoCapacity);
            return None;
        };
        let cap = self.capacity_tokens(model);
        let i = &mut self.instances[id.index()];
        i.model = model;
        i.pool = pool;
        i.role = Role::Provisioning;
        i.capacity_tokens = cap;
        i.provisioning_done_ts = Some(self.now + delay);
        self.inst_records[id.index()].pool = pool;
        self.open_interval(id, RoleKind::Provisioning);
        self.provisioning_start[id.index()] = Some((self.now, source));
        self.endpoints[ep].provisioning += 1;
        self.events
            .push(self.now + delay, EventKind::ProvisioningDone { inst: id });
        self.log_scale(model, region, pool, ScaleAction::Out(source));
        Some(source)
    }

    fn activate(&mut self, ep: usize, id: InstanceId) {
        let active = &mut self.endpoints[ep].active;
        let pos = active.partition_point(|&x| x < id);
        active.insert(pos, id);
        let backlog: Vec<u32> = self.endpoints[ep].backlog.drain(..).collect();
        for req in backlog {
            let inst = self.pick_instance(ep);
            self.enqueue(inst, req);
        }
        self.kick(id);
    }

    fn provisioning_done(&mut self, id: InstanceId) {
        let (model, region, pool) = {
            let i = &mut self.instances[id.index()];
            i.role = Role::Private;
            i.provisioning_done_ts = None;
            (i.model, i.region, i.pool)
        };
        let (start, source) = self.provisioning_start[id.index()]
            .take()
            .expect("provisioning start");
        self.ledger.provisioning.push(ProvisioningRecord {
            instance: id,
            model,
            region,
            source,
            start,
            end: self.now,
            gpus: self.inst_records[id.index()].gpus,
        });
        self.open_interval(id, RoleKind::Private);
        self.count_change(model, region, 1);
        let ep = self.ep(model, region, pool);
        self.endpoints[ep].provisioning -= 1;
        self.activate(ep, id);
    }

    /// Drains the least-loaded accepting instance and donates it to the spot
    /// pool once idle. Refuses at the floor.
    pub fn scale_in(&mut self, model: ModelId, region: RegionId, pool: Pool) -> bool {
        let ep = self.ep(model, region, pool);
        if self.endpoints[ep].active.len() as u32 <= self.cfg.floor() {
            return false;
        }
        let now = self.now;
        let victim = route_to_instance(
            self.endpoints[ep]
                .active
                .iter()
                .map(|&id| (id, self.instances[id.index()].remaining_tokens(now))),
        )
        .expect("non-empty endpoint");
        self.endpoints[ep].active.retain(|&x| x != victim);
        self.endpoints[ep].draining.push(victim);
        self.instances[victim.index()].role = Role::Draining;
        let queued = self.instances[victim.index()].take_queue();
        for k in queued {
            let inst = self.pick_instance(ep);
            self.enqueue(inst, k.idx);
        }
        if self.instances[victim.index()].running.is_empty() {
            self.begin_spot_switch(victim);
        }
        self.log_scale(model, region, pool, ScaleAction::In);
        true
    }

    fn begin_spot_switch(&mut self, id: InstanceId) {
        let (model, region, pool) = {
            let i = &mut self.instances[id.index()];
            i.role = Role::ToSpot;
            (i.model, i.region, i.pool)
        };
        let ep = self.ep(model, region, pool);
        self.endpoints[ep].draining.retain(|&x| x != id);
        self.events.push(
            self.now + self.cfg.spot_switch_delay,
            EventKind::SpotSwitchDone { inst: id },
        );
    }

    fn spot_switch_done(&mut self, id: InstanceId) {
        let (model, region) = {
            let i = &mut self.instances[id.index()];
            i.role = Role::Spot;
            (i.model, i.region)
        };
        self.open_interval(id, RoleKind::Spot);
        self.count_change(model, region, -1);
        let spot = &mut self.spot[region.index()];
        let pos = spot.partition_point(|&x| x < id);
        spot.insert(pos, id);
    }

    fn record_sample(&mut self) {
        if !self.cfg.record_utilization {
            return;
        }
        for s in 0..self.ledger.utilization.len() {
            let (m, r, p) = {
                let u = &self.ledger.utilization[s];
                (u.model, u.region, u.pool)
            };
            let v = self.utilization(m, r, p).map(|u| u as f32);
            self.ledger.utilization[s].values.push(v);
        }
    }

    fn check_memory(&mut self) {
        for i in &self.instances {
            let used = i.used_tokens_at(self.now);
            let ok = i.recomputed_used_tokens(self.now) == used
                && (used <= i.capacity_tokens || i.running.len() == 1)
                && (i.reserved_tokens <= i.capacity_tokens || i.running.len() == 1);
            if !ok {
                self.ledger.counters.memory_violations += 1;
            }
        }
    }

    fn finish(mut self) -> MetricsLedger {
        for id in 0..self.instances.len() {
            self.close_interval(InstanceId(id as u32));
        }
        self.ledger.end_ts = self.now;
        self.ledger.instances = std::mem::take(&mut self.inst_records);
        self.ledger.requests = self
            .reqs
            .iter()
            .zip(&self.served)
            .map(|(r, s)| RequestRecord {
                id: r.id.0,
                tier: r.tier,
                model: r.model,
                client_region: r.client_region,
                served_region: s.region,
                instance: s.instance,
                arrival_ts: r.arrival_ts,
                routed_ts: r.lifecycle.routed_ts,
                dequeued_ts: r.lifecycle.dequeued_ts,
                first_token_ts: r.lifecycle.first_token_ts,
                completed_ts: r.lifecycle.completed_ts,
                input_tokens: r.input_tokens,
                output_tokens: r.output_tokens,
                ttft_deadline: r.ttft_deadline,
                completion_deadline: r.completion_deadline,
                priority: s.queued_priority.unwrap_or(r.priority),
            })
            .collect();
        self.ledger
    }
}
