use nalgebra::{DMatrix, DVector, Schur};

use super::{Forecast, ForecastError, HORIZON};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Order {
    pub p: usize,
    pub d: usize,
    pub q: usize,
}

impl Order {
    pub const fn new(p: usize, d: usize, q: usize) -> Self {
        Self { p, d, q }
    }
}

macro_rules! grid {
    ($(($p:expr, $d:expr, $q:expr)),* $(,)?) => { [$(Order::new($p, $d, $q)),*] };
}

/// p in 0..=3, d in 0..=1, q in 0..=1.
pub const DEFAULT_ORDERS: [Order; 16] = grid![
    (0, 0, 0),
    (0, 0, 1),
    (1, 0, 0),
    (1, 0, 1),
    (2, 0, 0),
    (2, 0, 1),
    (3, 0, 0),
    (3, 0, 1),
    (0, 1, 0),
    (0, 1, 1),
    (1, 1, 0),
    (1, 1, 1),
    (2, 1, 0),
    (2, 1, 1),
    (3, 1, 0),
    (3, 1, 1),
];

pub const MIN_SAMPLES: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct ArimaModel {
    pub order: Order,
    pub intercept: f64,
    pub ar: Vec<f64>,
    pub ma: Vec<f64>,
    /// Most recent innovations of the differenced series, oldest first.
    pub residuals: Vec<f64>,
    pub aic: f64,
    /// Mean model used when no candidate could be fitted.
    pub fallback: bool,
}

impl ArimaModel {
    pub fn mean_model(values: &[f64]) -> Self {
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self {
            order: Order::new(0, 0, 0),
            intercept: mean,
            ar: Vec::new(),
            ma: Vec::new(),
            residuals: Vec::new(),
            aic: f64::INFINITY,
            fallback: true,
        }
    }
}

fn difference(x: &[f64], d: usize) -> Vec<f64> {
    let mut z = x.to_vec();
    for _ in 0..d {
        z = z.windows(2).map(|w| w[1] - w[0]).collect();
    }
    z
}

fn is_constant(x: &[f64]) -> bool {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let scale = lo.abs().max(hi.abs()).max(1.0);
    hi - lo <= 1e-12 * scale
}

/// Least squares; returns coefficients and residuals.
fn ols(rows: &[Vec<f64>], y: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let (n, k) = (rows.len(), rows.first()?.len());
    if n <= k {
        return None;
    }
    let x = DMatrix::from_fn(n, k, |i, j| rows[i][j]);
    let yv = DVector::from_column_slice(y);
    let beta = x.clone().svd(true, true).solve(&yv, 1e-10).ok()?;
    if beta.iter().any(|b| !b.is_finite()) {
        return None;
    }
    let resid = &yv - &x * &beta;
    Some((
        beta.iter().copied().collect(),
        resid.iter().copied().collect(),
    ))
}

fn fit_order(x: &[f64], order: Order) -> Option<ArimaModel> {
    let Order { p, d, q } = order;
    let z = difference(x, d);
    let nz = z.len();
    if is_constant(&z) {
        // A constant differenced series only supports the drift-only model.
        if p + q > 0 {
            return None;
        }
        return Some(finish(
            order,
            z[0],
            Vec::new(),
            Vec::new(),
            &vec![0.0; nz],
            &z,
        ));
    }
    // Stage 1: long autoregression for innovation estimates.
    let mut innov = vec![0.0; nz];
    let mut start = p;
    if q > 0 {
        let m = (p + q + 1).max(6).min(nz / 3);
        if m <= q {
            return None;
        }
        let rows: Vec<Vec<f64>> = (m..nz)
            .map(|t| {
                std::iter::once(1.0)
                    .chain((1..=m).map(|i| z[t - i]))
                    .collect()
            })
            .collect();
        let (_, resid) = ols(&rows, &z[m..])?;
        innov[m..].copy_from_slice(&resid);
        start = p.max(m + q);
    }
    // Stage 2: regress on own lags and lagged innovations. Differenced
    // models carry no constant.
    let c = usize::from(d == 0);
    let rows: Vec<Vec<f64>> = (start..nz)
        .map(|t| {
            std::iter::repeat_n(1.0, c)
                .chain((1..=p).map(|i| z[t - i]))
                .chain((1..=q).map(|j| innov[t - j]))
                .collect()
        })
        .collect();
    if rows.len() < p + q + 3 {
        return None;
    }
    if p + q + c == 0 {
        // Random walk: nothing to estimate.
        return Some(finish(order, 0.0, Vec::new(), Vec::new(), &z, &z));
    }
    let (beta, resid) = ols(&rows, &z[start..])?;
    let (ar, ma) = (&beta[c..c + p], &beta[c + p..]);
    // Explosive AR or non-invertible MA fits are discarded.
    let ma_neg: Vec<f64> = ma.iter().map(|t| -t).collect();
    if !stable(ar) || !stable(&ma_neg) {
        return None;
    }
    let intercept = if c == 1 { beta[0] } else { 0.0 };
    Some(finish(
        order,
        intercept,
        ar.to_vec(),
        ma.to_vec(),
        &resid,
        &z,
    ))
}

/// True when every root of `1 - c1 z - ... - ck z^k` lies outside the unit
/// circle, i.e. the companion matrix has spectral radius below one.
fn stable(c: &[f64]) -> bool {
    let k = c.len();
    if k == 0 {
        return true;
    }
    let comp = DMatrix::from_fn(k, k, |i, j| {
        if i == 0 {
            c[j]
        } else if i == j + 1 {
            1.0
        } else {
            0.0
        }
    });
    // Schur iteration is capped; a decomposition that does not converge
    // rejects the candidate.
    Schur::try_new(comp, f64::EPSILON, 500).is_some_and(|s| {
        s.complex_eigenvalues()
            .iter()
            .all(|l| l.norm() < 1.0 - 1e-6)
    })
}

fn finish(
    order: Order,
    intercept: f64,
    ar: Vec<f64>,
    ma: Vec<f64>,
    resid: &[f64],
    z: &[f64],
) -> ArimaModel {
    let n = resid.len() as f64;
    let rss: f64 = resid.iter().map(|e| e * e).sum();
    let mean_sq = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
    let rss = rss.max(1e-9 * n * mean_sq.max(1.0));
    // Coefficients, the constant when undifferenced, and the noise variance.
    let k = (order.p + order.q + usize::from(order.d == 0) + 1) as f64;
    let aic = 2.0 * k + n * (rss / n).ln();
    let keep = resid.len().saturating_sub(order.q);
    ArimaModel {
        order,
        intercept,
        ar,
        ma,
        residuals: resid[keep..].to_vec(),
        aic,
        fallback: false,
    }
}

/// Fits every candidate order and keeps the lowest AIC; earlier candidates win
/// ties. Falls back to the mean model if nothing fits.
pub fn fit_arima(values: &[f64], orders: &[Order]) -> Result<ArimaModel, ForecastError> {
    if values.len() < MIN_SAMPLES {
        return Err(ForecastError::SeriesTooShort {
            len: values.len(),
            need: MIN_SAMPLES,
        });
    }
    if orders.is_empty() {
        return Err(ForecastError::NoCandidates);
    }
    if is_constant(values) {
        return Ok(ArimaModel::mean_model(values));
    }
    let mut best: Option<ArimaModel> = None;
    for &o in orders {
        if let Some(m) = fit_order(values, o) {
            if m.aic.is_finite() && best.as_ref().is_none_or(|b| m.aic < b.aic) {
                best = Some(m);
            }
        }
    }
    Ok(best.unwrap_or_else(|| ArimaModel::mean_model(values)))
}

/// Sixty recursive one-step predictions following `series`.
pub fn forecast_next_hour(model: &ArimaModel, series: &[f64]) -> Forecast {
    if model.fallback || series.is_empty() {
        return Forecast::from_values(vec![model.intercept; HORIZON]);
    }
    let d = model.order.d;
    // Last value at each differencing level below d.
    let mut levels: Vec<f64> = (0..d)
        .map(|i| *difference(series, i).last().unwrap_or(&0.0))
        .collect();
    let mut z = difference(series, d);
    let mut e = model.residuals.clone();
    let mut out = Vec::with_capacity(HORIZON);
    for _ in 0..HORIZON {
        let mut next = model.intercept;
        for (i, phi) in model.ar.iter().enumerate() {
            next += phi * z.len().checked_sub(i + 1).map_or(0.0, |k| z[k]);
        }
        for (j, th) in model.ma.iter().enumerate() {
            next += th * e.len().checked_sub(j + 1).map_or(0.0, |k| e[k]);
        }
        z.push(next);
        e.push(0.0);
        let mut v = next;
        for lvl in levels.iter_mut().rev() {
            *lvl += v;
            v = *lvl;
        }
        out.push(v);
    }
    Forecast::from_values(out)
}
