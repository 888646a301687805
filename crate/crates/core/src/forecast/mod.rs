//! Per-minute input TPS forecasting.

mod arima;

pub use arima::{fit_arima, forecast_next_hour, ArimaModel, Order, DEFAULT_ORDERS};

use std::collections::VecDeque;

use thiserror::Error;

pub const HORIZON: usize = 60;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ForecastError {
    #[error("series has {len} samples, need at least {need}")]
    SeriesTooShort { len: usize, need: usize },
    #[error("no positive actual values to score against")]
    AllZeroActuals,
    #[error("predicted and actual lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("empty candidate order set")]
    NoCandidates,
}

/// Fixed-capacity buffer of per-minute TPS samples, oldest first.
#[derive(Debug, Clone)]
pub struct TpsSeries {
    cap: usize,
    values: VecDeque<f64>,
}

impl TpsSeries {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            values: VecDeque::with_capacity(cap),
        }
    }

    pub fn from_values(cap: usize, values: &[f64]) -> Self {
        let mut s = Self::new(cap);
        for &v in values {
            s.push(v);
        }
        s
    }

    /// Appends one minute. Negative or non-finite values are stored as 0.
    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.cap {
            self.values.pop_front();
        }
        self.values
            .push_back(if v.is_finite() { v.max(0.0) } else { 0.0 });
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }

    /// Last `n` samples, or fewer if the buffer is shorter.
    pub fn tail(&self, n: usize) -> Vec<f64> {
        let skip = self.values.len().saturating_sub(n);
        self.values.iter().skip(skip).copied().collect()
    }

    pub fn mean_tail(&self, n: usize) -> f64 {
        let t = self.tail(n);
        if t.is_empty() {
            0.0
        } else {
            t.iter().sum::<f64>() / t.len() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    /// One value per minute of the next hour.
    pub values: Vec<f64>,
    pub peak: f64,
    pub buffer: f64,
}

impl Forecast {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        for v in &mut values {
            if !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
        let peak = values.iter().copied().fold(0.0, f64::max);
        Self {
            values,
            peak,
            buffer: 0.0,
        }
    }

    pub fn with_buffer(mut self, buffer: f64) -> Self {
        self.buffer = buffer;
        self
    }

    /// Peak plus headroom, the demand handed to the optimizer.
    pub fn demand(&self) -> f64 {
        self.peak + self.buffer
    }

    pub fn at_minute(&self, minute: usize) -> f64 {
        self.values
            .get(minute)
            .or(self.values.last())
            .copied()
            .unwrap_or(0.0)
    }
}

/// Headroom: 10% of the mean NIW input TPS over the trailing window.
pub fn compute_buffer(niw_tps: &[f64]) -> f64 {
    if niw_tps.is_empty() {
        return 0.0;
    }
    0.10 * niw_tps.iter().sum::<f64>() / niw_tps.len() as f64
}

/// Flat forecast at the mean of the last `window` samples.
pub fn moving_average_forecast(
    series: &TpsSeries,
    window: usize,
) -> Result<Forecast, ForecastError> {
    if window == 0 || series.len() < window {
        return Err(ForecastError::SeriesTooShort {
            len: series.len(),
            need: window.max(1),
        });
    }
    Ok(Forecast::from_values(vec![
        series.mean_tail(window);
        HORIZON
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mape {
    pub percent: f64,
    /// Samples dropped because the actual value was zero.
    pub excluded: usize,
}

pub fn mape(predicted: &[f64], actual: &[f64]) -> Result<Mape, ForecastError> {
    if predicted.len() != actual.len() {
        return Err(ForecastError::LengthMismatch(predicted.len(), actual.len()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, a) in predicted.iter().zip(actual) {
        if *a > 0.0 {
            sum += (p - a).abs() / a;
            n += 1;
        }
    }
    if n == 0 {
        return Err(ForecastError::AllZeroActuals);
    }
    Ok(Mape {
        percent: 100.0 * sum / n as f64,
        excluded: actual.len() - n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn buffer_is_ten_percent_of_mean() {
        assert_eq!(compute_buffer(&[]), 0.0);
        assert_eq!(compute_buffer(&[0.0; 60]), 0.0);
        assert!((compute_buffer(&[1000.0; 60]) - 100.0).abs() < 1e-9);
    }

    #[test]
    fn moving_average_examples() {
        let s = TpsSeries::from_values(60, &[1.0, 2.0, 3.0, 6.0]);
        assert_eq!(
            moving_average_forecast(&s, 4).unwrap().values,
            vec![3.0; HORIZON]
        );
        let c = TpsSeries::from_values(60, &[7.0; 30]);
        assert_eq!(moving_average_forecast(&c, 15).unwrap().peak, 7.0);
        let step: Vec<f64> = (0..20).map(|t| if t < 15 { 0.0 } else { 100.0 }).collect();
        let f = moving_average_forecast(&TpsSeries::from_values(60, &step), 10).unwrap();
        assert_eq!(f.values[0], 50.0);
        assert!(matches!(
            moving_average_forecast(&c, 31),
            Err(ForecastError::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[1.0, 2.0], &[1.0, 2.0]).unwrap().percent, 0.0);
        let a = [10.0, 20.0, 40.0];
        let p: Vec<f64> = a.iter().map(|x| 1.1 * x).collect();
        assert!((mape(&p, &a).unwrap().percent - 10.0).abs() < 1e-9);
        assert!((mape(&[80.0], &[100.0]).unwrap().percent - 20.0).abs() < 1e-9);
        let m = mape(&[5.0, 80.0], &[0.0, 100.0]).unwrap();
        assert_eq!(m.excluded, 1);
        assert_eq!(mape(&[1.0], &[0.0]), Err(ForecastError::AllZeroActuals));
    }

    #[test]
    fn series_is_a_ring_buffer() {
        let mut s = TpsSeries::new(3);
        for v in [1.0, -2.0, 3.0, 4.0] {
            s.push(v);
        }
        assert_eq!(s.to_vec(), vec![0.0, 3.0, 4.0]);
        assert_eq!(s.tail(2), vec![3.0, 4.0]);
    }

    #[test]
    fn forecast_clips_negatives() {
        let f = Forecast::from_values(vec![-5.0, 3.0]);
        assert_eq!(f.values, vec![0.0, 3.0]);
        assert_eq!(f.peak, 3.0);
    }
}
