use thiserror::Error;

use crate::types::{Request, SimTime, MINUTE};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("series of length {len} is too short for lag {lag}")]
    SeriesTooShort { len: usize, lag: usize },
    #[error("series has zero variance")]
    ZeroVariance,
}

/// Pearson autocorrelation of `series` with itself shifted by `lag` samples.
pub fn periodicity_score(series: &[f64], lag: usize) -> Result<f64, StatsError> {
    if series.len() <= lag + 1 {
        return Err(StatsError::SeriesTooShort {
            len: series.len(),
            lag,
        });
    }
    let a = &series[..series.len() - lag];
    let b = &series[lag..];
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va <= f64::EPSILON * n || vb <= f64::EPSILON * n {
        return Err(StatsError::ZeroVariance);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Per-minute arrival counts over `[0, horizon)`.
pub fn minute_counts<'a>(
    requests: impl IntoIterator<Item = &'a Request>,
    horizon: SimTime,
) -> Vec<f64> {
    let bins = horizon.div_ceil(MINUTE) as usize;
    let mut out = vec![0.0; bins];
    for r in requests {
        let b = (r.arrival_ts / MINUTE) as usize;
        if b < bins {
            out[b] += 1.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_series_has_no_score() {
        assert_eq!(
            periodicity_score(&[3.0; 100], 10),
            Err(StatsError::ZeroVariance)
        );
    }

    #[test]
    fn too_short_series_rejected() {
        assert!(matches!(
            periodicity_score(&[1.0, 2.0], 5),
            Err(StatsError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn exactly_periodic_series_scores_one() {
        let day = 1440;
        let s: Vec<f64> = (0..3 * day)
            .map(|m| 100.0 + 50.0 * (2.0 * std::f64::consts::PI * m as f64 / day as f64).sin())
            .collect();
        let score = periodicity_score(&s, day).unwrap();
        assert!((score - 1.0).abs() < 1e-9, "{score}");
    }

    #[test]
    fn white_noise_scores_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let s: Vec<f64> = (0..10_080).map(|_| rng.random::<f64>()).collect();
        let score = periodicity_score(&s, 1440).unwrap();
        assert!(score.abs() < 0.05, "{score}");
    }
}
