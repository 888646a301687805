use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fleetsim_core::autoscaler::{Forecaster, Strategy};
use fleetsim_core::config::FlatConfig;
use fleetsim_core::experiment::{desk_scale_workload, write_bundle, Scenario, Settings};
use fleetsim_core::routing::Policy;
use fleetsim_core::types::{Catalog, Tier, HOUR, SECOND};
use fleetsim_core::workload::{
    export_trace, generate_synthetic, ingest_trace, SyntheticWorkloadSpec,
};

#[derive(Parser)]
#[command(name = "fleetsim", version, about = "Multi-region LLM fleet simulator")]
struct Cli {
    /// Seed for workload generation and the simulator.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run, compare) or trace file (gen-trace).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// key = value experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one strategy and write the output bundle.
    Run {
        #[arg(long, default_value = "lt-ua")]
        strategy: Strategy,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Simulate several strategies on the same workload.
    Compare {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "reactive,lt-i,lt-u,lt-ua"
        )]
        strategies: Vec<Strategy>,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        knobs: Knobs,
    },
    /// Write a synthetic workload as a trace file.
    GenTrace {
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
    /// Parse a trace strictly and report per-tier counts.
    ValidateTrace {
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Args)]
struct Source {
    #[arg(long, conflicts_with = "synthetic")]
    trace: Option<PathBuf>,
    /// key = value synthetic workload spec.
    #[arg(long)]
    synthetic: Option<PathBuf>,
}

#[derive(Args, Default)]
struct Knobs {
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    solver_budget_sec: Option<f64>,
    #[arg(long)]
    forecaster: Option<Forecaster>,
    #[arg(long)]
    arima_window: Option<usize>,
    #[arg(long)]
    ma_window: Option<usize>,
    #[arg(long)]
    up_threshold: Option<f64>,
    #[arg(long)]
    down_threshold: Option<f64>,
    #[arg(long)]
    cooldown_sec: Option<f64>,
    /// Instance queue policy: fcfs, edf, pf or dpa.
    #[arg(long, alias = "policy")]
    scheduler: Option<Policy>,
    #[arg(long)]
    tau_n: Option<f64>,
    #[arg(long)]
    tau_p: Option<f64>,
    /// Utilization above which IW traffic leaves its home region.
    #[arg(long)]
    region_threshold: Option<f64>,
    #[arg(long)]
    niw_sig_low: Option<f64>,
    #[arg(long)]
    niw_sig_lower: Option<f64>,
    #[arg(long)]
    niw_escalate_hours: Option<f64>,
    #[arg(long)]
    niw_deadline_hours: Option<f64>,
    #[arg(long)]
    initial_instances: Option<u32>,
}

/// Input files that do not exist exit with this code.
struct MissingInput(PathBuf);

impl std::fmt::Debug for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} not found", self.0.display())
    }
}

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} not found", self.0.display())
    }
}

impl std::error::Error for MissingInput {}

fn require(p: &Path) -> Result<()> {
    if !p.exists() {
        return Err(MissingInput(p.to_path_buf()).into());
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<FlatConfig> {
    match &cli.config {
        Some(p) => {
            require(p)?;
            Ok(FlatConfig::load(p)?)
        }
        None => Ok(FlatConfig::default()),
    }
}

fn secs(v: f64, flag: &str) -> Result<u64> {
    if !(v.is_finite() && v >= 0.0) {
        bail!("{flag} must be a non-negative number of seconds");
    }
    Ok((v * SECOND as f64).round() as u64)
}

fn settings(cli: &Cli, cfg: &FlatConfig, k: &Knobs) -> Result<Settings> {
    let mut s = Settings::from_flat(cfg)?;
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    macro_rules! set {
        ($field:ident, $target:expr) => {
            if let Some(v) = k.$field {
                $target = v;
            }
        };
    }
    set!(epsilon, s.epsilon);
    set!(forecaster, s.forecaster);
    set!(arima_window, s.arima_window);
    set!(ma_window, s.ma_window);
    set!(up_threshold, s.up_threshold);
    set!(down_threshold, s.down_threshold);
    set!(scheduler, s.policy);
    set!(region_threshold, s.route_threshold);
    set!(niw_sig_low, s.niw.sig_low);
    set!(niw_sig_lower, s.niw.sig_lower);
    set!(initial_instances, s.initial_instances);
    if let Some(v) = k.solver_budget_sec {
        s.solver_budget = Duration::try_from_secs_f64(v).context("--solver-budget-sec")?;
    }
    if let Some(v) = k.cooldown_sec {
        s.cooldown = secs(v, "--cooldown-sec")?;
    }
    if let Some(v) = k.tau_n {
        s.tau_n = secs(v, "--tau-n")?;
    }
    if let Some(v) = k.tau_p {
        s.tau_p = secs(v, "--tau-p")?;
    }
    if let Some(v) = k.niw_escalate_hours {
        s.niw.escalate_after = (v * HOUR as f64).round() as u64;
    }
    if let Some(v) = k.niw_deadline_hours {
        s.sla.niw_deadline = (v * HOUR as f64).round() as u64;
    }
    Ok(s)
}

/// Synthetic spec from a file, else from `workload.*` keys in the config,
/// else the built-in desk-scale day.
fn synthetic_spec(
    path: Option<&Path>,
    cfg: &FlatConfig,
    cat: &Catalog,
    seed: Option<u64>,
) -> Result<SyntheticWorkloadSpec> {
    let mut spec = if let Some(p) = path {
        require(p)?;
        SyntheticWorkloadSpec::from_flat(&FlatConfig::load(p)?, cat)?
    } else if cfg.with_prefix("workload").next().is_some() {
        let mut sub = FlatConfig::default();
        for (k, v) in cfg.with_prefix("workload") {
            sub.set(k, v);
        }
        SyntheticWorkloadSpec::from_flat(&sub, cat)?
    } else {
        desk_scale_workload(cat, 0)
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    Ok(spec)
}

fn scenario(cli: &Cli, src: &Source, knobs: &Knobs) -> Result<Scenario> {
    let cfg = load_config(cli)?;
    let s = settings(cli, &cfg, knobs)?;
    let cat = Catalog::desk_scale();
    let sc = match &src.trace {
        Some(p) => {
            require(p)?;
            Scenario::from_trace(cat, p, s)?
        }
        None => {
            let spec = synthetic_spec(src.synthetic.as_deref(), &cfg, &cat, cli.seed)?;
            Scenario::synthetic(cat, &spec, s)?
        }
    };
    Ok(sc)
}

fn simulate(cli: &Cli, strategies: &[Strategy], src: &Source, knobs: &Knobs) -> Result<()> {
    if strategies.is_empty() {
        bail!("no strategies given");
    }
    let sc = scenario(cli, src, knobs)?;
    let runs = sc.compare(strategies)?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    write_bundle(&out, &sc, &runs)?;
    for r in &runs {
        let s = &r.summary;
        println!(
            "{:<9} instance_hours={:.2} waste_gpu_h={:.2} iw_p95_ttft_ms={}",
            s.strategy.as_str(),
            s.instance_hours,
            s.waste_gpu_hours,
            s.iw_p95_ttft
                .map(|v| v.to_string())
                .unwrap_or_else(|| "-".into())
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn gen_trace(cli: &Cli, synthetic: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let s = Settings::from_flat(&cfg)?;
    let cat = Catalog::desk_scale();
    let spec = synthetic_spec(synthetic, &cfg, &cat, cli.seed)?;
    let reqs = generate_synthetic(&spec, &s.sla)?;
    match &cli.out {
        Some(p) => {
            let f = std::fs::File::create(p).with_context(|| p.display().to_string())?;
            export_trace(&reqs, &cat, std::io::BufWriter::new(f))?;
            eprintln!("{} requests -> {}", reqs.len(), p.display());
        }
        None => export_trace(
            &reqs,
            &cat,
            std::io::BufWriter::new(std::io::stdout().lock()),
        )?,
    }
    Ok(())
}

fn validate_trace(cli: &Cli, path: &Path) -> Result<()> {
    require(path)?;
    let s = Settings::from_flat(&load_config(cli)?)?;
    let report = ingest_trace(path, &Catalog::desk_scale(), &s.sla, true)?;
    println!("records,{}", report.requests.len());
    for t in Tier::ALL {
        println!(
            "{},{}",
            t.as_str(),
            report.requests.iter().filter(|r| r.tier == t).count()
        );
    }
    println!("unsorted,{}", report.unsorted_warnings);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run {
            strategy,
            source,
            knobs,
        } => simulate(&cli, &[*strategy], source, knobs),
        Cmd::Compare {
            strategies,
            source,
            knobs,
        } => simulate(&cli, strategies, source, knobs),
        Cmd::GenTrace { synthetic } => gen_trace(&cli, synthetic.as_deref()),
        Cmd::ValidateTrace { trace } => validate_trace(&cli, trace),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingInput>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
