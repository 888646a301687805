//! Scaling strategies and the control plane that drives them inside the
//! simulator: NIW deferral, per-minute TPS tracking, hourly forecasts and
//! plans.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{
    compute_buffer, fit_arima, forecast_next_hour, moving_average_forecast, Forecast, TpsSeries,
    DEFAULT_ORDERS,
};
use crate::metrics::PlanRecord;
use crate::niw::{Deferred, DeferredQueue, NiwConfig};
use crate::optimizer::{self, apply_floor_and_caps, Fleet, Grid, ModelDemand, OptimizerConfig};
use crate::routing::argmin_by;
use crate::sim::{ControlPlane, Pool, Sim};
use crate::types::{GpuId, ModelId, RegionId, SimTime, Tier, HOUR, MINUTE, SECOND};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScalerError {
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("unknown forecaster {0:?}")]
    UnknownForecaster(String),
    #[error("invalid scaler config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Fixed fleet, no scaling.
    Static,
    Siloed,
    Reactive,
    LtI,
    LtU,
    LtUa,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Static,
        Strategy::Siloed,
        Strategy::Reactive,
        Strategy::LtI,
        Strategy::LtU,
        Strategy::LtUa,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Static => "static",
            Strategy::Siloed => "siloed",
            Strategy::Reactive => "reactive",
            Strategy::LtI => "lt-i",
            Strategy::LtU => "lt-u",
            Strategy::LtUa => "lt-ua",
        }
    }

    pub fn uses_plan(self) -> bool {
        matches!(self, Strategy::LtI | Strategy::LtU | Strategy::LtUa)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = ScalerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| ScalerError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Forecaster {
    Arima,
    MovingAverage,
}

impl FromStr for Forecaster {
    type Err = ScalerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arima" => Ok(Forecaster::Arima),
            "ma" => Ok(Forecaster::MovingAverage),
            _ => Err(ScalerError::UnknownForecaster(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalerConfig {
    pub strategy: Strategy,
    pub up_threshold: f64,
    pub down_threshold: f64,
    pub cooldown: SimTime,
    /// Final part of each hour in which LT-UA may pass the plan target.
    pub tail_window: SimTime,
    pub over_factor: f64,
    pub under_factor: f64,
    /// Trailing window for observed TPS in the LT-UA ratio.
    pub ratio_window: SimTime,
}

impl ScalerConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            up_threshold: 0.70,
            down_threshold: 0.30,
            cooldown: 15 * SECOND,
            tail_window: 20 * MINUTE,
            over_factor: 5.0,
            under_factor: 0.5,
            ratio_window: 5 * MINUTE,
        }
    }

    pub fn validate(&self) -> Result<(), ScalerError> {
        if !(0.0 < self.down_threshold
            && self.down_threshold < self.up_threshold
            && self.up_threshold < 1.0)
        {
            return Err(ScalerError::Invalid("need 0 < down < up < 1".into()));
        }
        if !(self.over_factor > 0.0 && self.under_factor > 0.0) {
            return Err(ScalerError::Invalid("factors must be positive".into()));
        }
        if self.tail_window > HOUR || self.ratio_window < MINUTE {
            return Err(ScalerError::Invalid(
                "tail window must fit in an hour, ratio window ≥ 1 min".into(),
            ));
        }
        Ok(())
    }

    fn cooled(&self, now: SimTime, last: Option<SimTime>) -> bool {
        last.is_none_or(|t| now >= t + self.cooldown)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Action {
    Hold,
    Out(u32),
    In(u32),
}

/// Utilization thresholds with cooldown.
pub fn reactive_step(
    util: Option<f64>,
    active: u32,
    floor: u32,
    now: SimTime,
    last: Option<SimTime>,
    cfg: &ScalerConfig,
) -> Action {
    let Some(u) = util else { return Action::Hold };
    if !cfg.cooled(now, last) {
        return Action::Hold;
    }
    if u > cfg.up_threshold {
        Action::Out(1)
    } else if u < cfg.down_threshold && active > floor {
        Action::In(1)
    } else {
        Action::Hold
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LtInput {
    pub target: u32,
    /// Active plus provisioning.
    pub committed: u32,
    pub active: u32,
    pub util: Option<f64>,
    /// Observed over predicted TPS.
    pub ratio: Option<f64>,
    pub in_tail: bool,
    pub now: SimTime,
    pub last: Option<SimTime>,
}

/// One plan-following decision. LT-I returns the full jump to the target;
/// the others move one instance per trigger.
pub fn lt_step(strategy: Strategy, x: &LtInput, floor: u32, cfg: &ScalerConfig) -> Action {
    let (t, n) = (x.target, x.committed);
    match strategy {
        Strategy::LtI => {
            if t > n {
                Action::Out(t - n)
            } else if n > t && x.active > floor {
                Action::In((n - t).min(x.active - floor))
            } else {
                Action::Hold
            }
        }
        Strategy::LtU | Strategy::LtUa => {
            let Some(u) = x.util else { return Action::Hold };
            if !cfg.cooled(x.now, x.last) {
                return Action::Hold;
            }
            let tail = strategy == Strategy::LtUa && x.in_tail;
            let over = tail && x.ratio.is_some_and(|r| r >= cfg.over_factor);
            let under = tail && x.ratio.is_some_and(|r| r <= cfg.under_factor);
            if u > cfg.up_threshold && (n < t || over) {
                Action::Out(1)
            } else if u < cfg.down_threshold && (n > t || under) && x.active > floor {
                Action::In(1)
            } else {
                Action::Hold
            }
        }
        _ => Action::Hold,
    }
}

#[derive(Debug, Clone)]
pub struct ControlConfig {
    pub scaler: ScalerConfig,
    pub niw: NiwConfig,
    /// Hold NIW requests in the deferred queue. Ignored when siloed.
    pub defer_niw: bool,
    pub forecaster: Forecaster,
    pub arima_window: usize,
    pub ma_window: usize,
    pub optimizer: OptimizerConfig,
}

impl ControlConfig {
    pub fn new(strategy: Strategy, optimizer: OptimizerConfig) -> Self {
        Self {
            scaler: ScalerConfig::new(strategy),
            niw: NiwConfig::default(),
            defer_niw: strategy != Strategy::Siloed,
            forecaster: Forecaster::Arima,
            arima_window: 60,
            ma_window: 15,
            optimizer,
        }
    }
}

/// Control plane for every strategy.
pub struct FleetController {
    cfg: ControlConfig,
    models: usize,
    regions: usize,
    gpu: GpuId,
    deferred: DeferredQueue,
    defer: bool,
    /// Per endpoint pool, indexed like the simulator's endpoints.
    last_action: Vec<Option<SimTime>>,
    /// Plan targets per (model, region).
    targets: Vec<Option<u32>>,
    forecasts: Vec<Option<Forecast>>,
    plan_ts: SimTime,
    iw_tps: Vec<TpsSeries>,
    niw_tps: Vec<TpsSeries>,
    iw_tokens: Vec<f64>,
    niw_tokens: Vec<f64>,
    minute: u64,
}

const SERIES_CAP: usize = 24 * 60;

impl FleetController {
    pub fn new(cfg: ControlConfig, sim_models: usize, sim_regions: usize, gpu: GpuId) -> Self {
        let n = sim_models * sim_regions;
        let defer = cfg.defer_niw && cfg.scaler.strategy != Strategy::Siloed;
        Self {
            deferred: DeferredQueue::new(sim_models, cfg.niw),
            cfg,
            models: sim_models,
            regions: sim_regions,
            gpu,
            defer,
            last_action: vec![None; n * 3],
            targets: vec![None; n],
            forecasts: vec![None; n],
            plan_ts: 0,
            iw_tps: (0..n).map(|_| TpsSeries::new(SERIES_CAP)).collect(),
            niw_tps: (0..n).map(|_| TpsSeries::new(SERIES_CAP)).collect(),
            iw_tokens: vec![0.0; n],
            niw_tokens: vec![0.0; n],
            minute: 0,
        }
    }

    pub fn deferred(&self) -> &DeferredQueue {
        &self.deferred
    }

    pub fn target(&self, m: ModelId, r: RegionId) -> Option<u32> {
        self.targets[self.mr(m, r)]
    }

    pub fn iw_series(&self, m: ModelId, r: RegionId) -> &TpsSeries {
        &self.iw_tps[self.mr(m, r)]
    }

    fn mr(&self, m: ModelId, r: RegionId) -> usize {
        m.index() * self.regions + r.index()
    }

    fn ep(&self, m: ModelId, r: RegionId, pool: Pool) -> usize {
        self.mr(m, r) * 3 + pool.index()
    }

    /// Closes every complete minute before `minute`.
    fn roll_to(&mut self, minute: u64) {
        while self.minute < minute {
            for i in 0..self.iw_tps.len() {
                self.iw_tps[i].push(self.iw_tokens[i] / 60.0);
                self.niw_tps[i].push(self.niw_tokens[i] / 60.0);
            }
            self.iw_tokens.iter_mut().for_each(|v| *v = 0.0);
            self.niw_tokens.iter_mut().for_each(|v| *v = 0.0);
            self.minute += 1;
        }
    }

    fn forecast(&self, series: &TpsSeries) -> Option<Forecast> {
        match self.cfg.forecaster {
            Forecaster::Arima => {
                let data = series.tail(self.cfg.arima_window);
                let model = fit_arima(&data, &DEFAULT_ORDERS).ok()?;
                Some(forecast_next_hour(&model, &data))
            }
            Forecaster::MovingAverage => moving_average_forecast(series, self.cfg.ma_window).ok(),
        }
    }

    fn plan(&mut self, sim: &mut Sim) {
        let now = sim.now();
        self.roll_to(now / MINUTE);
        let mut demand = Vec::with_capacity(self.models);
        for m in 0..self.models {
            let mut regional = Vec::with_capacity(self.regions);
            let mut sum = vec![0.0; crate::forecast::HORIZON];
            let mut buffers = 0.0;
            for r in 0..self.regions {
                let i = m * self.regions + r;
                let Some(f) = self.forecast(&self.iw_tps[i]) else {
                    return;
                };
                let f = f.with_buffer(compute_buffer(&self.niw_tps[i].tail(60)));
                for (s, v) in sum.iter_mut().zip(&f.values) {
                    *s += v;
                }
                buffers += f.buffer;
                regional.push(f.demand());
                self.forecasts[i] = Some(f);
            }
            let global = sum.iter().copied().fold(0.0, f64::max) + buffers;
            demand.push(ModelDemand {
                regional_peak: regional,
                global_peak: global,
            });
        }
        self.plan_ts = now;
        let cfgs = sim.cfg();
        let grid = Grid {
            models: self.models,
            regions: self.regions,
            gpus: 1,
        };
        let mut n = Vec::with_capacity(grid.len());
        for m in cfgs.catalog.model_ids() {
            for r in cfgs.catalog.region_ids() {
                n.push(i64::from(sim.counts(m, r, Pool::Shared).committed()));
            }
        }
        let fleet = Fleet { grid, n };
        let theta: Vec<Vec<f64>> = cfgs
            .catalog
            .model_ids()
            .map(|m| vec![cfgs.perf.instance_tps(m, self.gpu).unwrap_or(1.0)])
            .collect();
        let mut ocfg = self.cfg.optimizer.clone();
        let g = self.gpu.index();
        ocfg.alpha = vec![ocfg.alpha[g]];
        ocfg.sigma = ocfg.sigma.iter().map(|row| vec![row[g]]).collect();
        let (floor, cap) = (i64::from(cfgs.floor()), i64::from(cfgs.cap()));
        let capacity: Vec<i64> = cfgs
            .catalog
            .region_ids()
            .map(|r| i64::from(cfgs.catalog.region(r).capacity_limit))
            .collect();
        let Ok(mut plan) = optimizer::solve(&fleet, &demand, &theta, cap, &ocfg) else {
            return;
        };
        let report = apply_floor_and_caps(&mut plan, &fleet, floor, cap, &capacity, &ocfg);
        let gpu = self.gpu;
        let ledger = sim.ledger_mut();
        ledger.counters.clamps += report.clamps;
        ledger.counters.clamp_objective_changes += u64::from(report.objective_changed);
        ledger.counters.infeasible_ticks += u64::from(!plan.infeasible.is_empty());
        ledger.counters.solver_timeouts += u64::from(!plan.optimal);
        for (i, &d) in plan.delta.iter().enumerate() {
            let (m, r, _) = grid.split(i);
            ledger.plans.push(PlanRecord {
                tick: now,
                model: ModelId(m as u16),
                region: RegionId(r as u16),
                gpu,
                delta: d,
                gamma: ocfg.alpha[0] * d as f64,
                mu: ocfg.sigma[m][0] * d.max(0) as f64,
            });
            self.targets[i] = Some((fleet.n[i] + d) as u32);
        }
        if self.cfg.scaler.strategy == Strategy::LtI {
            for m in sim.cfg().catalog.model_ids() {
                for r in sim.cfg().catalog.region_ids() {
                    self.consider(sim, m, r, Pool::Shared);
                }
            }
        }
    }

    fn ratio(&mut self, m: ModelId, r: RegionId, now: SimTime) -> Option<f64> {
        self.roll_to(now / MINUTE);
        let i = self.mr(m, r);
        let f = self.forecasts[i].as_ref()?;
        let minute = ((now - self.plan_ts) / MINUTE) as usize;
        let predicted = f.at_minute(minute);
        let window = (self.cfg.scaler.ratio_window / MINUTE) as usize;
        let observed = self.iw_tps[i].mean_tail(window);
        if predicted > 0.0 {
            Some(observed / predicted)
        } else if observed > 0.0 {
            Some(f64::INFINITY)
        } else {
            None
        }
    }

    /// Evaluates the strategy for one endpoint pool and applies the result.
    fn consider(&mut self, sim: &mut Sim, m: ModelId, r: RegionId, pool: Pool) {
        let strategy = self.cfg.scaler.strategy;
        let scfg = self.cfg.scaler;
        let now = sim.now();
        let floor = sim.cfg().floor();
        let counts = sim.counts(m, r, pool);
        let util = sim.utilization(m, r, pool);
        let ep = self.ep(m, r, pool);
        let last = self.last_action[ep];
        let mut ratio = None;
        let mut target = None;
        let action = match strategy {
            Strategy::Static => Action::Hold,
            Strategy::Siloed | Strategy::Reactive => {
                reactive_step(util, counts.active, floor, now, last, &scfg)
            }
            Strategy::LtI | Strategy::LtU | Strategy::LtUa => {
                let Some(t) = self.targets[self.mr(m, r)] else {
                    return;
                };
                target = Some(t);
                let in_tail = now % HOUR >= HOUR - scfg.tail_window;
                if strategy == Strategy::LtUa && in_tail {
                    ratio = self.ratio(m, r, now);
                }
                let x = LtInput {
                    target: t,
                    committed: counts.committed(),
                    active: counts.active,
                    util,
                    ratio,
                    in_tail,
                    now,
                    last,
                };
                let a = lt_step(strategy, &x, floor, &scfg);
                let wants_down = in_tail
                    && ratio.is_some_and(|q| q <= scfg.under_factor)
                    && util.is_some_and(|u| u < scfg.down_threshold)
                    && counts.active <= floor;
                if strategy == Strategy::LtUa && wants_down && scfg.cooled(now, last) {
                    sim.ledger_mut().counters.floor_conflicts += 1;
                }
                a
            }
        };
        if action == Action::Hold {
            return;
        }
        let before = sim.ledger_mut().scale_events.len();
        match action {
            Action::Out(k) => (0..k).for_each(|_| {
                sim.scale_out(m, r, pool);
            }),
            Action::In(k) => (0..k).for_each(|_| {
                sim.scale_in(m, r, pool);
            }),
            Action::Hold => {}
        }
        self.last_action[ep] = Some(now);
        if target.is_some() {
            for e in &mut sim.ledger_mut().scale_events[before..] {
                e.target = target;
                e.ratio = ratio;
            }
        }
    }

    fn release(sim: &mut Sim, d: Deferred, region: RegionId) {
        sim.set_priority(d.req, d.priority);
        sim.dispatch(d.req, region, Pool::Shared);
    }

    fn least_utilized(sim: &Sim, m: ModelId) -> Option<RegionId> {
        let regions: Vec<RegionId> = sim.cfg().catalog.region_ids().collect();
        let utils = regions
            .iter()
            .map(|&r| sim.utilization(m, r, Pool::Shared).unwrap_or(f64::INFINITY));
        argmin_by(utils).map(|i| regions[i])
    }

    fn service_niw(&mut self, sim: &mut Sim) {
        let now = sim.now();
        let escalated = self.deferred.escalate(now);
        sim.ledger_mut().counters.niw_escalations += escalated;
        let due = self.deferred.due_for_release(now);
        sim.ledger_mut().counters.niw_force_releases += due.len() as u64;
        for (m, d) in due {
            let region = Self::least_utilized(sim, m).unwrap_or(sim.request(d.req).client_region);
            Self::release(sim, d, region);
        }
        for m in 0..self.models {
            let m = ModelId(m as u16);
            if self.deferred.len(m) == 0 {
                continue;
            }
            for r in 0..self.regions {
                let r = RegionId(r as u16);
                let Some(u) = sim.utilization(m, r, Pool::Shared) else {
                    continue;
                };
                for d in self.deferred.on_capacity_signal(m, u) {
                    Self::release(sim, d, r);
                }
            }
        }
    }
}

impl ControlPlane for FleetController {
    fn on_arrival(&mut self, sim: &mut Sim, req: u32) {
        let r = sim.request(req);
        let (model, region, tier, input) = (r.model, r.client_region, r.tier, r.input_tokens);
        let (output, deadline, priority, arrival) = (
            r.output_tokens,
            r.completion_deadline,
            r.priority,
            r.arrival_ts,
        );
        self.roll_to(arrival / MINUTE);
        let i = self.mr(model, region);
        if tier == Tier::Niw {
            self.niw_tokens[i] += f64::from(input);
        } else {
            self.iw_tokens[i] += f64::from(input);
        }
        if tier == Tier::Niw && self.defer {
            let est_service = sim.estimate_service(model, input, output);
            self.deferred.enqueue(
                model,
                Deferred {
                    req,
                    enqueue_ts: sim.now(),
                    deadline,
                    priority,
                    est_service,
                },
            );
        } else {
            sim.route_default(req);
        }
    }

    fn on_landing(&mut self, sim: &mut Sim, model: ModelId, region: RegionId, pool: Pool) {
        if !matches!(self.cfg.scaler.strategy, Strategy::Static | Strategy::LtI) {
            self.consider(sim, model, region, pool);
        }
    }

    fn on_sample(&mut self, sim: &mut Sim) {
        if self.defer {
            self.service_niw(sim);
        }
        if matches!(self.cfg.scaler.strategy, Strategy::Static | Strategy::LtI) {
            return;
        }
        let pools = sim.cfg().pools();
        for m in 0..self.models {
            for r in 0..self.regions {
                for &pool in pools {
                    self.consider(sim, ModelId(m as u16), RegionId(r as u16), pool);
                }
            }
        }
    }

    fn on_forecast_tick(&mut self, sim: &mut Sim) {
        if self.cfg.scaler.strategy.uses_plan() {
            self.plan(sim);
        }
    }
}
