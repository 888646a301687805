//! Scenario assembly, strategy runs and the CSV output bundle.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use thiserror::Error;

use crate::autoscaler::{
    ControlConfig, FleetController, Forecaster, ScalerConfig, ScalerError, Strategy,
};
use crate::config::{ConfigError, FlatConfig};
use crate::metrics::{percentile, MetricsLedger, Window};
use crate::niw::NiwConfig;
use crate::optimizer::OptimizerConfig;
use crate::perf::{PerfError, PerfModel, TokenMoments};
use crate::routing::{Policy, RegionRoutingConfig, RoutingError, SchedulerConfig};
use crate::sim::{DecodeMode, Sim, SimConfig, SimError};
use crate::types::{
    Catalog, DomainError, Request, SimTime, SlaDefaults, Tier, HOUR, MINUTE, SECOND,
};
use crate::workload::{ingest_trace, StreamSpec, SyntheticWorkloadSpec, TokenDist, WorkloadError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Perf(#[from] PerfError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Scaler(#[from] ScalerError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid setting: {0}")]
    Invalid(String),
}

/// Everything a run needs besides the strategy.
#[derive(Debug, Clone)]
pub struct Settings {
    pub gpu: String,
    pub initial_instances: u32,
    pub siloed_niw_instances: u32,
    pub epsilon: f64,
    pub solver_budget: Duration,
    pub forecaster: Forecaster,
    pub arima_window: usize,
    pub ma_window: usize,
    pub policy: Policy,
    pub tau_n: SimTime,
    pub tau_p: SimTime,
    pub up_threshold: f64,
    pub down_threshold: f64,
    pub cooldown: SimTime,
    pub route_threshold: f64,
    /// Start of the aggregation window; earlier time is warm-up.
    pub measure_from: SimTime,
    pub seed: u64,
    pub decode_mode: DecodeMode,
    pub cost_per_hour: f64,
    pub instance_bin: SimTime,
    pub latency_bin: SimTime,
    pub profiles: Option<PathBuf>,
    pub capacities: Option<PathBuf>,
    pub niw: NiwConfig,
    pub sla: SlaDefaults,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            gpu: "a100x8".into(),
            initial_instances: 20,
            siloed_niw_instances: 4,
            epsilon: 0.6,
            solver_budget: Duration::from_secs(30),
            forecaster: Forecaster::Arima,
            arima_window: 60,
            ma_window: 15,
            policy: Policy::Fcfs,
            tau_n: 60 * SECOND,
            tau_p: 10 * SECOND,
            up_threshold: 0.70,
            down_threshold: 0.30,
            cooldown: 15 * SECOND,
            route_threshold: 0.70,
            measure_from: 2 * HOUR,
            seed: 0,
            decode_mode: DecodeMode::Coarse,
            cost_per_hour: 98.32,
            instance_bin: 15 * MINUTE,
            latency_bin: 3 * HOUR,
            profiles: None,
            capacities: None,
            niw: NiwConfig::default(),
            sla: SlaDefaults::default(),
        }
    }
}

fn secs(x: f64) -> SimTime {
    (x * SECOND as f64).round() as SimTime
}

impl Settings {
    /// Reads overrides from a flat config; unknown top-level keys are rejected.
    pub fn from_flat(cfg: &FlatConfig) -> Result<Self, ExperimentError> {
        let mut s = Settings::default();
        for (k, v) in cfg.iter() {
            if k.starts_with("workload.") {
                continue;
            }
            let num = |v: &str| -> Result<f64, ExperimentError> {
                v.parse().map_err(|_| {
                    ConfigError::Value {
                        key: k.to_string(),
                        value: v.to_string(),
                    }
                    .into()
                })
            };
            match k {
                "gpu" => s.gpu = v.to_string(),
                "initial_instances" => s.initial_instances = num(v)? as u32,
                "siloed_niw_instances" => s.siloed_niw_instances = num(v)? as u32,
                "epsilon" => s.epsilon = num(v)?,
                "solver_budget_sec" => s.solver_budget = Duration::from_secs_f64(num(v)?),
                "forecaster" => s.forecaster = v.parse()?,
                "arima_window" => s.arima_window = num(v)? as usize,
                "ma_window" => s.ma_window = num(v)? as usize,
                "policy" => s.policy = v.parse()?,
                "tau_n_sec" => s.tau_n = secs(num(v)?),
                "tau_p_sec" => s.tau_p = secs(num(v)?),
                "up_threshold" => s.up_threshold = num(v)?,
                "down_threshold" => s.down_threshold = num(v)?,
                "cooldown_sec" => s.cooldown = secs(num(v)?),
                "route_threshold" => s.route_threshold = num(v)?,
                "measure_from_min" => s.measure_from = (num(v)? * MINUTE as f64) as SimTime,
                "seed" => s.seed = num(v)? as u64,
                "decode_mode" => {
                    s.decode_mode = match v {
                        "fine" => DecodeMode::Fine,
                        "coarse" => DecodeMode::Coarse,
                        _ => {
                            return Err(ConfigError::Value {
                                key: k.into(),
                                value: v.into(),
                            }
                            .into())
                        }
                    }
                }
                "cost_per_hour" => s.cost_per_hour = num(v)?,
                "profiles" => s.profiles = Some(PathBuf::from(v)),
                "capacities" => s.capacities = Some(PathBuf::from(v)),
                "niw_sig_low" => s.niw.sig_low = num(v)?,
                "niw_sig_lower" => s.niw.sig_lower = num(v)?,
                "niw_escalate_hours" => s.niw.escalate_after = (num(v)? * HOUR as f64) as SimTime,
                "niw_deadline_hours" => s.sla.niw_deadline = (num(v)? * HOUR as f64) as SimTime,
                other => return Err(ExperimentError::Invalid(format!("unknown key `{other}`"))),
            }
        }
        Ok(s)
    }

    fn scaler(&self, strategy: Strategy) -> ScalerConfig {
        ScalerConfig {
            up_threshold: self.up_threshold,
            down_threshold: self.down_threshold,
            cooldown: self.cooldown,
            ..ScalerConfig::new(strategy)
        }
    }
}

/// A fixed workload on a fixed world, ready to run under any strategy.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub settings: Settings,
    pub sim: SimConfig,
    pub requests: Vec<Request>,
    pub optimizer: OptimizerConfig,
    pub unsorted_trace: u64,
}

/// Token shapes used by the desk-scale workload, indexed like the desk catalog.
pub fn desk_scale_tokens() -> Vec<TokenDist> {
    vec![
        TokenDist {
            input_median: 1500.0,
            input_sigma: 0.8,
            output_median: 200.0,
            output_sigma: 0.9,
        },
        TokenDist {
            input_median: 1800.0,
            input_sigma: 0.8,
            output_median: 250.0,
            output_sigma: 0.9,
        },
        TokenDist {
            input_median: 1200.0,
            input_sigma: 0.9,
            output_median: 150.0,
            output_sigma: 0.9,
        },
        TokenDist {
            input_median: 1000.0,
            input_sigma: 0.9,
            output_median: 120.0,
            output_sigma: 0.9,
        },
    ]
}

/// One weekday of diurnal traffic for 4 models in 3 regions.
pub fn desk_scale_workload(catalog: &Catalog, seed: u64) -> SyntheticWorkloadSpec {
    // Interactive requests per second at the daily mean, per model and region.
    let iw_rps = [0.30, 0.40, 0.30, 0.30];
    let region_scale = [1.0, 0.8, 0.6];
    let mut streams = Vec::new();
    for m in catalog.model_ids() {
        for r in catalog.region_ids() {
            let base =
                iw_rps[m.index() % iw_rps.len()] * region_scale[r.index() % region_scale.len()];
            for (tier, share, amp) in [
                (Tier::IwFast, 0.6, 0.7),
                (Tier::IwNormal, 0.4, 0.6),
                (Tier::Niw, 0.25, 0.1),
            ] {
                streams.push(StreamSpec {
                    model: m,
                    region: r,
                    tier,
                    base_rps: base * share,
                    diurnal_amplitude: amp,
                    weekend_damping: 0.6,
                    burst_probability: if tier == Tier::Niw { 0.0 } else { 0.002 },
                    burst_multiplier: 1.5,
                });
            }
        }
    }
    SyntheticWorkloadSpec {
        duration: 24 * HOUR,
        start_offset: crate::types::DAY,
        peak_hour: 14.0,
        region_offsets_hours: (0..catalog.regions.len()).map(|i| -(i as f64)).collect(),
        burst_window: 5 * MINUTE,
        streams,
        tokens: desk_scale_tokens(),
        scheduled_bursts: Vec::new(),
        seed,
    }
}

fn empirical_moments(requests: &[Request], models: usize) -> Vec<Option<TokenMoments>> {
    let mut acc = vec![(0.0, 0.0, 0.0, 0u64); models];
    for r in requests {
        let a = &mut acc[r.model.index()];
        a.0 += f64::from(r.input_tokens);
        a.1 += f64::from(r.output_tokens);
        a.2 += f64::from(r.output_tokens).powi(2);
        a.3 += 1;
    }
    acc.into_iter()
        .map(|(i, o, o2, n)| {
            (n > 0).then(|| {
                let n = n as f64;
                TokenMoments {
                    mean_input: i / n,
                    mean_output: o / n,
                    mean_output_sq: o2 / n,
                }
            })
        })
        .collect()
}

impl Scenario {
    /// Builds a scenario from explicit requests. Performance profiles come
    /// from `settings.profiles` or are derived analytically from the
    /// requests' token moments.
    pub fn new(
        catalog: Catalog,
        requests: Vec<Request>,
        settings: Settings,
    ) -> Result<Self, ExperimentError> {
        catalog.validate()?;
        let fallback = desk_scale_tokens();
        let moments: Vec<TokenMoments> = empirical_moments(&requests, catalog.models.len())
            .into_iter()
            .enumerate()
            .map(|(i, m)| m.unwrap_or_else(|| fallback[i % fallback.len()].moments()))
            .collect();
        Self::with_moments(catalog, requests, settings, &moments)
    }

    pub fn with_moments(
        catalog: Catalog,
        requests: Vec<Request>,
        settings: Settings,
        moments: &[TokenMoments],
    ) -> Result<Self, ExperimentError> {
        let gpu = catalog.gpu_id(&settings.gpu)?;
        let mut perf = PerfModel::analytic_default(&catalog, moments);
        let open = |p: &Path| {
            std::fs::File::open(p).map_err(|source| ExperimentError::Io {
                path: p.display().to_string(),
                source,
            })
        };
        if let Some(p) = &settings.profiles {
            perf.load_profiles(open(p)?, &catalog)?;
        }
        if let Some(p) = &settings.capacities {
            perf.load_capacities(open(p)?, &catalog)?;
        }
        let last = requests.iter().map(|r| r.arrival_ts).max().unwrap_or(0);
        let horizon = (last + 1).div_ceil(HOUR).max(1) * HOUR;
        let mut sim = SimConfig::new(catalog.clone(), perf, gpu, horizon);
        sim.initial_instances = settings.initial_instances;
        sim.sla = settings.sla;
        sim.scheduler = SchedulerConfig {
            policy: settings.policy,
            tau_n: settings.tau_n,
            tau_p: settings.tau_p,
        };
        sim.region_routing = RegionRoutingConfig::from_catalog(&catalog, settings.route_threshold);
        sim.decode_mode = settings.decode_mode;
        sim.seed = settings.seed;
        let mut optimizer = OptimizerConfig::from_catalog(&catalog, settings.epsilon);
        optimizer.budget = settings.solver_budget;
        optimizer
            .validate()
            .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
        settings.scaler(Strategy::Reactive).validate()?;
        if !(0.0 < settings.niw.sig_lower
            && settings.niw.sig_lower <= settings.niw.sig_low
            && settings.niw.sig_low <= 1.0)
        {
            return Err(ExperimentError::Invalid("niw signal thresholds".into()));
        }
        Ok(Self {
            settings,
            sim,
            requests,
            optimizer,
            unsorted_trace: 0,
        })
    }

    pub fn synthetic(
        catalog: Catalog,
        spec: &SyntheticWorkloadSpec,
        settings: Settings,
    ) -> Result<Self, ExperimentError> {
        let requests = crate::workload::generate_synthetic(spec, &settings.sla)?;
        let moments: Vec<TokenMoments> = spec.tokens.iter().map(TokenDist::moments).collect();
        let mut sc = Self::with_moments(catalog, requests, settings, &moments)?;
        sc.sim.horizon = sc.sim.horizon.max(spec.duration.div_ceil(HOUR) * HOUR);
        Ok(sc)
    }

    pub fn from_trace(
        catalog: Catalog,
        path: &Path,
        settings: Settings,
    ) -> Result<Self, ExperimentError> {
        let report = ingest_trace(path, &catalog, &settings.sla, true)?;
        let mut sc = Self::new(catalog, report.requests, settings)?;
        sc.unsorted_trace = report.unsorted_warnings;
        Ok(sc)
    }

    pub fn desk_scale(seed: u64, settings: Settings) -> Result<Self, ExperimentError> {
        let catalog = Catalog::desk_scale();
        let spec = desk_scale_workload(&catalog, seed);
        Self::synthetic(catalog, &spec, Settings { seed, ..settings })
    }

    pub fn window(&self) -> Window {
        Window {
            from: self.settings.measure_from.min(self.sim.horizon),
            to: self.sim.horizon,
        }
    }

    /// Simulator config for `strategy`; siloed runs split every endpoint.
    pub fn sim_config(&self, strategy: Strategy) -> SimConfig {
        let mut c = self.sim.clone();
        if strategy == Strategy::Siloed {
            c.siloed_niw_instances = Some(self.settings.siloed_niw_instances);
        }
        c
    }

    pub fn control_config(&self, strategy: Strategy) -> ControlConfig {
        let mut c = ControlConfig::new(strategy, self.optimizer.clone());
        c.scaler = self.settings.scaler(strategy);
        c.forecaster = self.settings.forecaster;
        c.arima_window = self.settings.arima_window;
        c.ma_window = self.settings.ma_window;
        c.niw = self.settings.niw;
        c
    }

    pub fn run(&self, strategy: Strategy) -> Result<RunOutput, ExperimentError> {
        let cfg = self.sim_config(strategy);
        let mut control = FleetController::new(
            self.control_config(strategy),
            cfg.catalog.models.len(),
            cfg.catalog.regions.len(),
            cfg.gpu,
        );
        let mut ledger = Sim::run(&cfg, self.requests.clone(), &mut control)?;
        ledger.counters.unsorted_trace = self.unsorted_trace;
        let summary = summarize(
            &ledger,
            strategy,
            self.window(),
            self.settings.cost_per_hour,
        );
        Ok(RunOutput {
            strategy,
            ledger,
            summary,
        })
    }

    /// Runs each strategy on its own thread; output order follows `strategies`.
    pub fn compare(&self, strategies: &[Strategy]) -> Result<Vec<RunOutput>, ExperimentError> {
        std::thread::scope(|s| {
            let handles: Vec<_> = strategies
                .iter()
                .map(|&st| s.spawn(move || self.run(st)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("strategy thread panicked"))
                .collect()
        })
    }
}

pub struct RunOutput {
    pub strategy: Strategy,
    pub ledger: MetricsLedger,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TierStats {
    pub requests: u64,
    pub completed: u64,
    pub p75_ttft: Option<SimTime>,
    pub p95_ttft: Option<SimTime>,
    pub p75_e2e: Option<SimTime>,
    pub p95_e2e: Option<SimTime>,
    pub violation_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub strategy: Strategy,
    pub instance_hours: f64,
    pub cost: f64,
    pub waste_gpu_hours: f64,
    pub spot_hours: f64,
    /// `[IwFast, IwNormal, Niw]`; counts cover the whole trace, latencies the window.
    pub tiers: [TierStats; 3],
    pub iw_p95_ttft: Option<SimTime>,
    pub scale_outs: u64,
    pub scale_ins: u64,
    pub no_capacity: u64,
}

pub fn summarize(
    ledger: &MetricsLedger,
    strategy: Strategy,
    w: Window,
    cost_per_hour: f64,
) -> Summary {
    let tier = |t: Tier| {
        let all = ledger.tier_requests(t, Window::all());
        let (mut requests, mut completed) = (0, 0);
        for r in all {
            requests += 1;
            completed += u64::from(r.completed_ts.is_some());
        }
        let ttft = ledger.ttfts(t, w);
        let e2e = ledger.e2es(t, w);
        TierStats {
            requests,
            completed,
            p75_ttft: percentile(&ttft, 75.0).ok(),
            p95_ttft: percentile(&ttft, 95.0).ok(),
            p75_e2e: percentile(&e2e, 75.0).ok(),
            p95_e2e: percentile(&e2e, 95.0).ok(),
            violation_rate: ledger.sla_violation_rate(t, w),
        }
    };
    let instance_hours = ledger.instance_hours(None, None, w);
    let mut counts = (0, 0, 0);
    for e in &ledger.scale_events {
        match e.action {
            crate::metrics::ScaleAction::Out(_) => counts.0 += 1,
            crate::metrics::ScaleAction::In => counts.1 += 1,
            crate::metrics::ScaleAction::NoCapacity => counts.2 += 1,
        }
    }
    Summary {
        strategy,
        instance_hours,
        cost: instance_hours * cost_per_hour,
        waste_gpu_hours: ledger.scaling_waste_hours(w),
        spot_hours: ledger.spot_hours(w),
        tiers: [tier(Tier::IwFast), tier(Tier::IwNormal), tier(Tier::Niw)],
        iw_p95_ttft: percentile(&ledger.iw_ttfts(w), 95.0).ok(),
        scale_outs: counts.0,
        scale_ins: counts.1,
        no_capacity: counts.2,
    }
}

fn opt(v: Option<SimTime>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_HEADER: &str = "strategy,instance_hours,cost,savings_vs_reactive,waste_gpu_hours,spot_hours,\
requests_iw_fast,requests_iw_normal,requests_niw,completed_iw_fast,completed_iw_normal,completed_niw,\
p75_ttft_ms_iw_fast,p95_ttft_ms_iw_fast,p75_e2e_ms_iw_fast,p95_e2e_ms_iw_fast,\
p75_ttft_ms_iw_normal,p95_ttft_ms_iw_normal,p75_e2e_ms_iw_normal,p95_e2e_ms_iw_normal,\
p75_ttft_ms_niw,p95_ttft_ms_niw,p75_e2e_ms_niw,p95_e2e_ms_niw,\
violation_iw_fast,violation_iw_normal,violation_niw,p95_ttft_ms_iw,scale_outs,scale_ins,no_capacity";

pub fn summary_csv(rows: &[&Summary]) -> String {
    let reactive = rows
        .iter()
        .find(|s| s.strategy == Strategy::Reactive)
        .map(|s| s.cost);
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for s in rows {
        let savings = reactive
            .map(|c| format!("{:.2}", c - s.cost))
            .unwrap_or_default();
        let _ = write!(
            out,
            "{},{:.4},{:.2},{},{:.4},{:.4}",
            s.strategy, s.instance_hours, s.cost, savings, s.waste_gpu_hours, s.spot_hours
        );
        for t in &s.tiers {
            let _ = write!(out, ",{}", t.requests);
        }
        for t in &s.tiers {
            let _ = write!(out, ",{}", t.completed);
        }
        for t in &s.tiers {
            let _ = write!(
                out,
                ",{},{},{},{}",
                opt(t.p75_ttft),
                opt(t.p95_ttft),
                opt(t.p75_e2e),
                opt(t.p95_e2e)
            );
        }
        for t in &s.tiers {
            let _ = write!(out, ",{:.6}", t.violation_rate);
        }
        let _ = writeln!(
            out,
            ",{},{},{},{}",
            opt(s.iw_p95_ttft),
            s.scale_outs,
            s.scale_ins,
            s.no_capacity
        );
    }
    out
}

/// Time-averaged private instance count per model and region per bin.
pub fn instances_csv(runs: &[&RunOutput], cat: &Catalog, horizon: SimTime, bin: SimTime) -> String {
    let mut out = String::from("strategy,bin_start_min,model,region,instances\n");
    for run in runs {
        let mut t = 0;
        while t < horizon {
            let w = Window {
                from: t,
                to: (t + bin).min(horizon),
            };
            let scale = HOUR as f64 / (w.to - w.from) as f64;
            for m in cat.model_ids() {
                for r in cat.region_ids() {
                    let n = run.ledger.instance_hours(Some(m), Some(r), w) * scale;
                    let _ = writeln!(
                        out,
                        "{},{},{},{},{:.4}",
                        run.strategy,
                        t / MINUTE,
                        cat.model(m).name,
                        cat.region(r).name,
                        n
                    );
                }
            }
            t += bin;
        }
    }
    out
}

pub fn latency_bins_csv(runs: &[&RunOutput], horizon: SimTime, bin: SimTime) -> String {
    let mut out = String::from(
        "strategy,bin_start_h,tier,requests,p75_ttft_ms,p95_ttft_ms,p75_e2e_ms,p95_e2e_ms,violation_rate\n",
    );
    for run in runs {
        let mut t = 0;
        while t < horizon {
            let w = Window {
                from: t,
                to: t + bin,
            };
            for tier in Tier::ALL {
                let ttft = run.ledger.ttfts(tier, w);
                let e2e = run.ledger.e2es(tier, w);
                let n = run.ledger.tier_requests(tier, w).count();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{:.6}",
                    run.strategy,
                    t / HOUR,
                    tier.as_str(),
                    n,
                    opt(percentile(&ttft, 75.0).ok()),
                    opt(percentile(&ttft, 95.0).ok()),
                    opt(percentile(&e2e, 75.0).ok()),
                    opt(percentile(&e2e, 95.0).ok()),
                    run.ledger.sla_violation_rate(tier, w)
                );
            }
            t += bin;
        }
    }
    out
}

pub fn plans_csv(runs: &[&RunOutput], cat: &Catalog) -> String {
    let mut out = String::from("strategy,tick,model,region,gpu,delta,gamma,mu\n");
    for run in runs {
        for p in &run.ledger.plans {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.6},{:.6}",
                run.strategy,
                p.tick,
                cat.model(p.model).name,
                cat.region(p.region).name,
                cat.gpu(p.gpu).name,
                p.delta,
                p.gamma,
                p.mu
            );
        }
    }
    out
}

pub const BUNDLE_FILES: [&str; 4] = [
    "summary.csv",
    "instances.csv",
    "latency_bins.csv",
    "plans.csv",
];

/// Writes the four CSV tables into `dir`, creating it if needed.
pub fn write_bundle(
    dir: &Path,
    scenario: &Scenario,
    runs: &[RunOutput],
) -> Result<(), ExperimentError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| ExperimentError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let refs: Vec<&RunOutput> = runs.iter().collect();
    let summaries: Vec<&Summary> = runs.iter().map(|r| &r.summary).collect();
    let cat = &scenario.sim.catalog;
    let horizon = scenario.sim.horizon;
    let tables = [
        summary_csv(&summaries),
        instances_csv(&refs, cat, horizon, scenario.settings.instance_bin),
        latency_bins_csv(&refs, horizon, scenario.settings.latency_bin),
        plans_csv(&refs, cat),
    ];
    for (name, body) in BUNDLE_FILES.iter().zip(tables) {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(io(&p))?;
    }
    Ok(())
}
