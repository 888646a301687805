//! Hourly instance-count planning: an integer program solved per model by
//! branch and bound over LP relaxations.

pub mod lp;

use std::time::{Duration, Instant};

use thiserror::Error;

use crate::types::{Catalog, HOUR};
use lp::{LpResult, Row, Sense};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizerError {
    #[error("epsilon must lie in (0, 1], got {0}")]
    Epsilon(f64),
    #[error("costs must be positive")]
    Cost,
    #[error("capacity theta must be positive for every model and GPU")]
    Theta,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("delta bounds must satisfy lo <= 0 <= hi and lo >= -n")]
    Bounds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Fraction of each region's peak that must be served locally.
    pub epsilon: f64,
    /// VM cost per GPU type.
    pub alpha: Vec<f64>,
    /// Instance start cost, `[model][gpu]`.
    pub sigma: Vec<Vec<f64>>,
    pub budget: Duration,
}

impl OptimizerConfig {
    /// α from hourly VM prices; σ is α times the mean start time in hours.
    pub fn from_catalog(cat: &Catalog, epsilon: f64) -> Self {
        let alpha: Vec<f64> = cat.gpus.iter().map(|g| g.hourly_cost).collect();
        let sigma = cat
            .models
            .iter()
            .map(|m| {
                cat.gpus
                    .iter()
                    .map(|g| {
                        g.hourly_cost * (g.vm_acquire_delay + m.local_deploy_delay) as f64
                            / HOUR as f64
                    })
                    .collect()
            })
            .collect();
        Self {
            epsilon,
            alpha,
            sigma,
            budget: Duration::from_secs(30),
        }
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(OptimizerError::Epsilon(self.epsilon));
        }
        let pos = |v: &f64| v.is_finite() && *v > 0.0;
        if !self.alpha.iter().all(pos) || !self.sigma.iter().flatten().all(pos) {
            return Err(OptimizerError::Cost);
        }
        Ok(())
    }
}

/// Dense `[model][region][gpu]` index space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub models: usize,
    pub regions: usize,
    pub gpus: usize,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.models * self.regions * self.gpus
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn idx(&self, m: usize, r: usize, g: usize) -> usize {
        (m * self.regions + r) * self.gpus + g
    }

    pub fn split(&self, i: usize) -> (usize, usize, usize) {
        (
            i / (self.regions * self.gpus),
            (i / self.gpus) % self.regions,
            i % self.gpus,
        )
    }
}

/// Forecast demand for one model in TPS.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelDemand {
    /// `max_w ρ_j(w)` per region, buffer included.
    pub regional_peak: Vec<f64>,
    /// `max_w Σ_j ρ_j(w)`, buffer included.
    pub global_peak: f64,
}

/// The single-model subproblem. Variables are indexed `r * gpus + g`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelProblem {
    pub regions: usize,
    pub gpus: usize,
    pub n: Vec<i64>,
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Already multiplied by ε.
    pub regional_demand: Vec<f64>,
    pub global_demand: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSolution {
    pub delta: Vec<i64>,
    pub gamma: f64,
    pub mu: f64,
    pub objective: f64,
    pub optimal: bool,
    /// Demand exceeded what the bounds allow and was clipped.
    pub infeasible: bool,
    pub nodes: u64,
}

impl ModelProblem {
    fn vars(&self) -> usize {
        self.regions * self.gpus
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        let v = self.vars();
        if [self.n.len(), self.lo.len(), self.hi.len()]
            .iter()
            .any(|&l| l != v)
            || self.theta.len() != self.gpus
            || self.alpha.len() != self.gpus
            || self.sigma.len() != self.gpus
            || self.regional_demand.len() != self.regions
        {
            return Err(OptimizerError::Shape(format!(
                "{} regions × {} gpus",
                self.regions, self.gpus
            )));
        }
        if !self.theta.iter().all(|t| t.is_finite() && *t > 0.0) {
            return Err(OptimizerError::Theta);
        }
        for i in 0..v {
            if self.lo[i] > 0 || self.hi[i] < 0 || self.lo[i] < -self.n[i] {
                return Err(OptimizerError::Bounds);
            }
        }
        Ok(())
    }

    /// `(γ, μ)` of an integer delta vector.
    pub fn cost(&self, delta: &[i64]) -> (f64, f64) {
        let (mut gamma, mut mu) = (0.0, 0.0);
        for (i, &d) in delta.iter().enumerate() {
            let g = i % self.gpus;
            gamma += self.alpha[g] * d as f64;
            mu += self.sigma[g] * d.max(0) as f64;
        }
        (gamma, mu)
    }

    fn capacity(&self, delta: &[i64], region: Option<usize>) -> f64 {
        let mut s = 0.0;
        for (i, &d) in delta.iter().enumerate() {
            if region.is_none_or(|r| i / self.gpus == r) {
                s += (self.n[i] + d) as f64 * self.theta[i % self.gpus];
            }
        }
        s
    }

    pub fn feasible(&self, delta: &[i64]) -> bool {
        let tol = |d: f64| 1e-9 * d.abs().max(1.0);
        (0..self.regions).all(|r| {
            self.capacity(delta, Some(r)) >= self.regional_demand[r] - tol(self.regional_demand[r])
        }) && self.capacity(delta, None) >= self.global_demand - tol(self.global_demand)
    }

    /// Lowers demand to what the upper bounds can serve. Returns whether any
    /// demand was clipped.
    fn clip_demand(&mut self) -> bool {
        let hi = self.hi.clone();
        let mut clipped = false;
        for r in 0..self.regions {
            let max = self.capacity(&hi, Some(r));
            if self.regional_demand[r] > max {
                self.regional_demand[r] = max;
                clipped = true;
            }
        }
        let max = self.capacity(&hi, None);
        if self.global_demand > max {
            self.global_demand = max;
            clipped = true;
        }
        clipped
    }

    /// LP relaxation with δ bounded to `[l, u]` per variable.
    /// Columns: δ⁺ for every variable, then δ⁻.
    fn relaxation(&self, l: &[i64], u: &[i64]) -> (Vec<f64>, Vec<Row>) {
        let v = self.vars();
        let mut cost = Vec::with_capacity(2 * v);
        for i in 0..v {
            let g = i % self.gpus;
            cost.push(self.alpha[g] + self.sigma[g]);
        }
        for i in 0..v {
            cost.push(-self.alpha[i % self.gpus]);
        }
        let mut rows = Vec::new();
        let demand_row = |region: Option<usize>, demand: f64| {
            let mut coeffs = vec![0.0; 2 * v];
            let mut base = 0.0;
            for i in 0..v {
                if region.is_none_or(|r| i / self.gpus == r) {
                    let th = self.theta[i % self.gpus];
                    coeffs[i] = th;
                    coeffs[v + i] = -th;
                    base += self.n[i] as f64 * th;
                }
            }
            Row {
                coeffs,
                sense: Sense::Ge,
                rhs: demand - base,
            }
        };
        for r in 0..self.regions {
            rows.push(demand_row(Some(r), self.regional_demand[r]));
        }
        rows.push(demand_row(None, self.global_demand));
        for i in 0..v {
            let unit = |col: usize, sign: f64| {
                let mut c = vec![0.0; 2 * v];
                c[col] = sign;
                c
            };
            rows.push(Row {
                coeffs: unit(i, 1.0),
                sense: Sense::Le,
                rhs: u[i].max(0) as f64,
            });
            rows.push(Row {
                coeffs: unit(v + i, 1.0),
                sense: Sense::Le,
                rhs: (-l[i]).max(0) as f64,
            });
            if l[i] > 0 {
                let mut c = unit(i, 1.0);
                c[v + i] = -1.0;
                rows.push(Row {
                    coeffs: c,
                    sense: Sense::Ge,
                    rhs: l[i] as f64,
                });
            }
            if u[i] < 0 {
                let mut c = unit(i, 1.0);
                c[v + i] = -1.0;
                rows.push(Row {
                    coeffs: c,
                    sense: Sense::Le,
                    rhs: u[i] as f64,
                });
            }
        }
        (cost, rows)
    }
}

/// Branch and bound. Demand beyond the upper bounds is clipped first, so
/// the all-upper-bound plan is always a feasible starting incumbent.
pub fn solve_model(
    problem: &ModelProblem,
    budget: Duration,
) -> Result<ModelSolution, OptimizerError> {
    problem.validate()?;
    let start = Instant::now();
    let mut p = problem.clone();
    let infeasible = p.clip_demand();
    let v = p.vars();
    let objective = |d: &[i64]| {
        let (g, m) = p.cost(d);
        g + m
    };
    let mut best = p.hi.clone();
    let mut best_obj = objective(&best);
    let mut optimal = true;
    let mut nodes = 0u64;
    let mut stack: Vec<(Vec<i64>, Vec<i64>)> = vec![(p.lo.clone(), p.hi.clone())];
    while let Some((l, u)) = stack.pop() {
        if start.elapsed() > budget {
            optimal = false;
            break;
        }
        nodes += 1;
        let (cost, rows) = p.relaxation(&l, &u);
        let LpResult::Optimal { x, value } = lp::solve(&cost, &rows) else {
            continue;
        };
        if value >= best_obj - 1e-9 * best_obj.abs().max(1.0) {
            continue;
        }
        let delta: Vec<f64> = (0..v).map(|i| x[i] - x[v + i]).collect();
        let frac = (0..v).find(|&i| (delta[i] - delta[i].round()).abs() > 1e-6);
        match frac {
            None => {
                let d: Vec<i64> = delta.iter().map(|x| x.round() as i64).collect();
                let obj = objective(&d);
                if p.feasible(&d) && obj < best_obj {
                    best = d;
                    best_obj = obj;
                }
            }
            Some(i) => {
                let (fl, ce) = (delta[i].floor() as i64, delta[i].ceil() as i64);
                let mut down_u = u.clone();
                down_u[i] = fl;
                let mut up_l = l.clone();
                up_l[i] = ce;
                // Explore the nearer side first.
                if delta[i] - fl as f64 > 0.5 {
                    stack.push((l, down_u));
                    stack.push((up_l, u));
                } else {
                    stack.push((up_l, u));
                    stack.push((l, down_u));
                }
            }
        }
    }
    let (gamma, mu) = p.cost(&best);
    Ok(ModelSolution {
        delta: best,
        gamma,
        mu,
        objective: gamma + mu,
        optimal,
        infeasible,
        nodes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingPlan {
    pub grid: Grid,
    pub delta: Vec<i64>,
    pub gamma: f64,
    pub mu: f64,
    pub objective: f64,
    pub optimal: bool,
    /// Models whose demand could not be met within the caps.
    pub infeasible: Vec<usize>,
}

/// Current fleet counts over a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Fleet {
    pub grid: Grid,
    pub n: Vec<i64>,
}

/// Solves every model independently.
///
/// `theta` is `[model][gpu]`; `max_per_endpoint` bounds `n + δ` from above.
pub fn solve(
    fleet: &Fleet,
    demand: &[ModelDemand],
    theta: &[Vec<f64>],
    max_per_endpoint: i64,
    cfg: &OptimizerConfig,
) -> Result<ScalingPlan, OptimizerError> {
    cfg.validate()?;
    let grid = fleet.grid;
    if demand.len() != grid.models
        || theta.len() != grid.models
        || cfg.alpha.len() != grid.gpus
        || cfg.sigma.len() != grid.models
        || fleet.n.len() != grid.len()
    {
        return Err(OptimizerError::Shape(
            "fleet, demand, theta and costs disagree".into(),
        ));
    }
    let start = Instant::now();
    let mut plan = ScalingPlan {
        grid,
        delta: vec![0; grid.len()],
        gamma: 0.0,
        mu: 0.0,
        objective: 0.0,
        optimal: true,
        infeasible: Vec::new(),
    };
    let per_model = grid.regions * grid.gpus;
    for m in 0..grid.models {
        let n = fleet.n[m * per_model..(m + 1) * per_model].to_vec();
        let problem = ModelProblem {
            regions: grid.regions,
            gpus: grid.gpus,
            lo: n.iter().map(|&x| -x).collect(),
            hi: n.iter().map(|&x| (max_per_endpoint - x).max(0)).collect(),
            n,
            theta: theta[m].clone(),
            alpha: cfg.alpha.clone(),
            sigma: cfg.sigma[m].clone(),
            regional_demand: demand[m]
                .regional_peak
                .iter()
                .map(|d| cfg.epsilon * d)
                .collect(),
            global_demand: demand[m].global_peak,
        };
        let remaining = cfg.budget.saturating_sub(start.elapsed());
        let s = solve_model(&problem, remaining)?;
        plan.delta[m * per_model..(m + 1) * per_model].copy_from_slice(&s.delta);
        plan.optimal &= s.optimal;
        if s.infeasible {
            plan.infeasible.push(m);
        }
    }
    let (gamma, mu, total) = objective(&plan, cfg);
    plan.gamma = gamma;
    plan.mu = mu;
    plan.objective = total;
    Ok(plan)
}

/// Recomputes `(γ, μ, γ + μ)` from the deltas alone.
pub fn objective(plan: &ScalingPlan, cfg: &OptimizerConfig) -> (f64, f64, f64) {
    let (mut gamma, mut mu) = (0.0, 0.0);
    for (i, &d) in plan.delta.iter().enumerate() {
        let (m, _, g) = plan.grid.split(i);
        gamma += cfg.alpha[g] * d as f64;
        mu += cfg.sigma[m][g] * d.max(0) as f64;
    }
    (gamma, mu, gamma + mu)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ClampReport {
    /// Endpoint entries whose delta changed.
    pub clamps: u64,
    pub objective_changed: bool,
}

/// Clamps `n + δ` into `[min, max]` per endpoint, then truncates positive
/// deltas proportionally wherever a region total exceeds its capacity.
pub fn apply_floor_and_caps(
    plan: &mut ScalingPlan,
    fleet: &Fleet,
    min: i64,
    max: i64,
    region_capacity: &[i64],
    cfg: &OptimizerConfig,
) -> ClampReport {
    let grid = plan.grid;
    let before = plan.delta.clone();
    let mut target: Vec<i64> = (0..grid.len())
        .map(|i| (fleet.n[i] + plan.delta[i]).clamp(min, max))
        .collect();
    for (r, &cap) in region_capacity.iter().enumerate().take(grid.regions) {
        let members: Vec<usize> = (0..grid.len()).filter(|&i| grid.split(i).1 == r).collect();
        let total: i64 = members.iter().map(|&i| target[i]).sum();
        if total <= cap {
            continue;
        }
        // Only growth above max(n, min) can be taken back.
        let base: Vec<i64> = members
            .iter()
            .map(|&i| fleet.n[i].max(min).min(target[i]))
            .collect();
        let growth: Vec<i64> = members
            .iter()
            .zip(&base)
            .map(|(&i, b)| target[i] - b)
            .collect();
        let p: i64 = growth.iter().sum();
        if p == 0 {
            continue;
        }
        let keep_total = p - (total - cap).min(p);
        let kept = largest_remainder(&growth, keep_total);
        for (k, &i) in members.iter().enumerate() {
            target[i] = base[k] + kept[k];
        }
    }
    for (i, t) in target.iter().enumerate() {
        plan.delta[i] = t - fleet.n[i];
    }
    let clamps = plan
        .delta
        .iter()
        .zip(&before)
        .filter(|(a, b)| a != b)
        .count() as u64;
    let old = plan.objective;
    let (gamma, mu, total) = objective(plan, cfg);
    plan.gamma = gamma;
    plan.mu = mu;
    plan.objective = total;
    ClampReport {
        clamps,
        objective_changed: total != old,
    }
}

/// Scales `weights` to sum to `total`, rounding by largest remainder with
/// ties going to the lower index.
pub fn largest_remainder(weights: &[i64], total: i64) -> Vec<i64> {
    let sum: i64 = weights.iter().sum();
    if sum == 0 {
        return vec![0; weights.len()];
    }
    let mut out: Vec<i64> = weights.iter().map(|w| w * total / sum).collect();
    let mut rem: Vec<(i64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| ((w * total) % sum, i))
        .collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - out.iter().sum::<i64>();
    for &(_, i) in rem.iter().take(short as usize) {
        out[i] += 1;
    }
    out
}
