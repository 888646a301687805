//! Batch execution time and per-instance capacity for (model, GPU) pairs,
//! interpolated from profile samples.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Deserialize;
use thiserror::Error;

use crate::types::{Catalog, GpuId, ModelId};

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("no profile for model {model} on gpu {gpu}")]
    UnknownPair { model: ModelId, gpu: GpuId },
    #[error("invalid profile table: {0}")]
    InvalidTable(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// First moments of a request-size distribution used to calibrate decode speed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenMoments {
    pub mean_input: f64,
    pub mean_output: f64,
    pub mean_output_sq: f64,
}

/// Interpolated duration plus whether the query fell outside the sampled range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lookup {
    pub ms: f64,
    pub extrapolated: bool,
}

/// Samples for one (model, GPU) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairProfile {
    /// (batch prompt tokens, ms), sorted by tokens.
    pub prefill: Vec<(f64, f64)>,
    /// Sorted batch-size axis of the decode grid.
    pub decode_batch: Vec<f64>,
    /// Sorted tokens-in-flight axis of the decode grid.
    pub decode_tokens: Vec<f64>,
    /// `decode_ms[b][t]` for `decode_batch[b]`, `decode_tokens[t]`.
    pub decode_ms: Vec<Vec<f64>>,
}

/// Locates `x` on a sorted axis: returns segment index `i` and weight `w` so the
/// value is `(1-w)·y[i] + w·y[i+1]`. `w` leaves [0,1] outside the axis.
fn segment(axis: &[f64], x: f64) -> (usize, f64, bool) {
    let n = axis.len();
    let i = match axis.iter().position(|&a| a > x) {
        Some(0) => 0,
        Some(p) => p - 1,
        None => n - 2,
    }
    .min(n - 2);
    let w = (x - axis[i]) / (axis[i + 1] - axis[i]);
    (i, w, x < axis[0] || x > axis[n - 1])
}

impl PairProfile {
    /// Constant-rate profile: prefill at `prefill_tps` prompt tokens/s and a flat
    /// per-iteration decode latency.
    pub fn analytic(prefill_tps: f64, decode_iter_ms: f64) -> Self {
        let xs = [1.0, 21_000.0, 131_072.0];
        Self {
            prefill: xs.iter().map(|&x| (x, x * 1_000.0 / prefill_tps)).collect(),
            decode_batch: vec![1.0, 256.0],
            decode_tokens: vec![1.0, 131_072.0],
            decode_ms: vec![vec![decode_iter_ms; 2]; 2],
        }
    }

    pub fn validate(&self) -> Result<(), PerfError> {
        let bad = |m: &str| Err(PerfError::InvalidTable(m.to_string()));
        let strictly_sorted = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]);
        if self.prefill.len() < 2 || self.decode_batch.len() < 2 || self.decode_tokens.len() < 2 {
            return bad("each axis needs at least 2 samples");
        }
        let px: Vec<f64> = self.prefill.iter().map(|p| p.0).collect();
        if !strictly_sorted(&px)
            || !strictly_sorted(&self.decode_batch)
            || !strictly_sorted(&self.decode_tokens)
        {
            return bad("sample axes must be strictly increasing");
        }
        if self.prefill.windows(2).any(|w| w[1].1 < w[0].1) {
            return bad("prefill time must be non-decreasing in tokens");
        }
        if self.decode_ms.len() != self.decode_batch.len()
            || self
                .decode_ms
                .iter()
                .any(|row| row.len() != self.decode_tokens.len())
        {
            return bad("decode grid is incomplete");
        }
        if self
            .decode_ms
            .iter()
            .any(|row| row.windows(2).any(|w| w[1] < w[0]))
        {
            return bad("decode time must be non-decreasing in tokens in flight");
        }
        if self.prefill.iter().any(|p| p.1 < 0.0)
            || self.decode_ms.iter().flatten().any(|&t| t < 0.0)
        {
            return bad("negative time");
        }
        Ok(())
    }

    pub fn prefill(&self, tokens: f64) -> Lookup {
        let xs: Vec<f64> = self.prefill.iter().map(|p| p.0).collect();
        let (i, w, extrapolated) = segment(&xs, tokens);
        let ms = (1.0 - w) * self.prefill[i].1 + w * self.prefill[i + 1].1;
        Lookup {
            ms: ms.max(0.0),
            extrapolated,
        }
    }

    pub fn decode(&self, batch_size: f64, tokens_in_flight: f64) -> Lookup {
        let (bi, bw, bx) = segment(&self.decode_batch, batch_size);
        let (ti, tw, tx) = segment(&self.decode_tokens, tokens_in_flight);
        let g = &self.decode_ms;
        let lo = (1.0 - tw) * g[bi][ti] + tw * g[bi][ti + 1];
        let hi = (1.0 - tw) * g[bi + 1][ti] + tw * g[bi + 1][ti + 1];
        Lookup {
            ms: ((1.0 - bw) * lo + bw * hi).max(0.0),
            extrapolated: bx || tx,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PerfModel {
    profiles: BTreeMap<(ModelId, GpuId), PairProfile>,
    capacity: BTreeMap<(ModelId, GpuId), f64>,
}

/// Built-in capacity and prefill speed for a known (model, GPU) name pair:
/// (θ input TPS, prefill tokens/s).
pub fn builtin_rates(model: &str, gpu: &str) -> Option<(f64, f64)> {
    let h100 = gpu.starts_with("h100");
    let (theta_a, theta_h, prefill) = match model {
        "llama2-70b" => (180.0, 308.0, 21_000.0),
        "bloom-176b" => (114.0, 240.0, 9_000.0),
        "llama3.1-8b" => (1_500.0, 2_500.0, 80_000.0),
        "llama3.2-3b" => (3_000.0, 5_000.0, 150_000.0),
        _ => return None,
    };
    if !(h100 || gpu.starts_with("a100")) {
        return None;
    }
    Some(if h100 {
        (theta_h, prefill * 2.0)
    } else {
        (theta_a, prefill)
    })
}

/// Per-iteration decode latency (ms) at which an instance whose KV memory is
/// `fill` full sustains `theta` input tokens/s, given request-size moments.
///
/// With Poisson arrivals at λ, the mean resident tokens are
/// λ·tbt·E[I·O + O²/2]; setting that to `fill·cap_tokens` and λ·E[I] = θ gives tbt.
pub fn calibrated_decode_ms(cap_tokens: f64, theta: f64, m: &TokenMoments, fill: f64) -> f64 {
    let resident = m.mean_input * m.mean_output + m.mean_output_sq / 2.0;
    1_000.0 * fill * cap_tokens * m.mean_input / (theta * resident)
}

#[derive(Deserialize)]
struct ProfileRow {
    model: String,
    gpu: String,
    phase: String,
    x1: f64,
    x2: f64,
    time_ms: f64,
}

#[derive(Deserialize)]
struct CapacityRow {
    model: String,
    gpu: String,
    tps: f64,
}

impl PerfModel {
    /// Analytic profiles for every (model, GPU) pair in the catalog with known
    /// built-in rates; decode is calibrated so the pair reaches θ at 70% memory.
    pub fn analytic_default(catalog: &Catalog, moments: &[TokenMoments]) -> Self {
        let mut pm = PerfModel::default();
        for m in catalog.model_ids() {
            for g in catalog.gpu_ids() {
                let Some((theta, prefill_tps)) =
                    builtin_rates(&catalog.model(m).name, &catalog.gpu(g).name)
                else {
                    continue;
                };
                let cap_tokens = catalog.effective_capacity(m, g) as f64
                    / catalog.model(m).kv_bytes_per_token as f64;
                let tbt = calibrated_decode_ms(cap_tokens, theta, &moments[m.index()], 0.65);
                pm.insert(m, g, PairProfile::analytic(prefill_tps, tbt), theta);
            }
        }
        pm
    }

    pub fn insert(&mut self, model: ModelId, gpu: GpuId, profile: PairProfile, theta: f64) {
        self.profiles.insert((model, gpu), profile);
        self.capacity.insert((model, gpu), theta);
    }

    pub fn set_capacity(&mut self, model: ModelId, gpu: GpuId, theta: f64) {
        self.capacity.insert((model, gpu), theta);
    }

    pub fn profile(&self, model: ModelId, gpu: GpuId) -> Result<&PairProfile, PerfError> {
        self.profiles
            .get(&(model, gpu))
            .ok_or(PerfError::UnknownPair { model, gpu })
    }

    pub fn prefill_time(
        &self,
        model: ModelId,
        gpu: GpuId,
        batch_prompt_tokens: u64,
    ) -> Result<Lookup, PerfError> {
        Ok(self
            .profile(model, gpu)?
            .prefill(batch_prompt_tokens as f64))
    }

    pub fn decode_iteration_time(
        &self,
        model: ModelId,
        gpu: GpuId,
        batch_size: usize,
        tokens_in_flight: u64,
    ) -> Result<Lookup, PerfError> {
        Ok(self
            .profile(model, gpu)?
            .decode(batch_size as f64, tokens_in_flight as f64))
    }

    pub fn instance_tps(&self, model: ModelId, gpu: GpuId) -> Result<f64, PerfError> {
        self.capacity
            .get(&(model, gpu))
            .copied()
            .ok_or(PerfError::UnknownPair { model, gpu })
    }

    pub fn pairs(&self) -> impl Iterator<Item = (ModelId, GpuId)> + '_ {
        self.capacity.keys().copied()
    }

    /// Replaces profiles with those read from a `model,gpu,phase,x1,x2,time_ms` table.
    pub fn load_profiles<R: Read>(
        &mut self,
        reader: R,
        catalog: &Catalog,
    ) -> Result<(), PerfError> {
        let mut prefill: BTreeMap<(ModelId, GpuId), Vec<(f64, f64)>> = BTreeMap::new();
        let mut decode: BTreeMap<(ModelId, GpuId), Vec<(f64, f64, f64)>> = BTreeMap::new();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        for rec in rdr.deserialize::<ProfileRow>() {
            let row = rec.map_err(|e| PerfError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let key = resolve(catalog, &row.model, &row.gpu)?;
            match row.phase.as_str() {
                "prefill" => prefill.entry(key).or_default().push((row.x1, row.time_ms)),
                "decode" => decode
                    .entry(key)
                    .or_default()
                    .push((row.x1, row.x2, row.time_ms)),
                other => return Err(PerfError::InvalidTable(format!("unknown phase `{other}`"))),
            }
        }
        for (key, mut pre) in prefill {
            pre.sort_by(|a, b| a.0.total_cmp(&b.0));
            let dec = decode.remove(&key).ok_or_else(|| {
                PerfError::InvalidTable(format!("pair {key:?} has no decode samples"))
            })?;
            let mut batch: Vec<f64> = dec.iter().map(|d| d.0).collect();
            let mut tokens: Vec<f64> = dec.iter().map(|d| d.1).collect();
            for axis in [&mut batch, &mut tokens] {
                axis.sort_by(f64::total_cmp);
                axis.dedup();
            }
            let mut grid = vec![vec![f64::NAN; tokens.len()]; batch.len()];
            for (b, t, ms) in dec {
                let bi = batch.iter().position(|&x| x == b).expect("axis value");
                let ti = tokens.iter().position(|&x| x == t).expect("axis value");
                grid[bi][ti] = ms;
            }
            if grid.iter().flatten().any(|v| v.is_nan()) {
                return Err(PerfError::InvalidTable(format!(
                    "pair {key:?} decode grid has holes"
                )));
            }
            let profile = PairProfile {
                prefill: pre,
                decode_batch: batch,
                decode_tokens: tokens,
                decode_ms: grid,
            };
            profile.validate()?;
            self.profiles.insert(key, profile);
        }
        if let Some(key) = decode.keys().next() {
            return Err(PerfError::InvalidTable(format!(
                "pair {key:?} has no prefill samples"
            )));
        }
        Ok(())
    }

    /// Reads θ overrides from a `model,gpu,tps` table.
    pub fn load_capacities<R: Read>(
        &mut self,
        reader: R,
        catalog: &Catalog,
    ) -> Result<(), PerfError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        for rec in rdr.deserialize::<CapacityRow>() {
            let row = rec.map_err(|e| PerfError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            if !(row.tps > 0.0) {
                return Err(PerfError::InvalidTable(format!(
                    "{}/{}: tps must be > 0",
                    row.model, row.gpu
                )));
            }
            let key = resolve(catalog, &row.model, &row.gpu)?;
            self.capacity.insert(key, row.tps);
        }
        Ok(())
    }
}

fn resolve(catalog: &Catalog, model: &str, gpu: &str) -> Result<(ModelId, GpuId), PerfError> {
    let m = catalog
        .model_id(model)
        .map_err(|e| PerfError::InvalidTable(e.to_string()))?;
    let g = catalog
        .gpu_id(gpu)
        .map_err(|e| PerfError::InvalidTable(e.to_string()))?;
    Ok((m, g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> PairProfile {
        PairProfile {
            prefill: vec![(0.0, 0.0), (1_000.0, 100.0), (3_000.0, 500.0)],
            decode_batch: vec![1.0, 8.0],
            decode_tokens: vec![100.0, 1_100.0],
            decode_ms: vec![vec![20.0, 30.0], vec![40.0, 80.0]],
        }
    }

    #[test]
    fn sample_points_are_exact() {
        let p = grid();
        assert_eq!(p.prefill(1_000.0).ms, 100.0);
        assert_eq!(p.decode(8.0, 100.0).ms, 40.0);
        assert!(!p.decode(8.0, 100.0).extrapolated);
    }

    #[test]
    fn prefill_midpoint_is_mean() {
        assert_eq!(grid().prefill(2_000.0).ms, 300.0);
    }

    #[test]
    fn prefill_extrapolates_with_last_slope() {
        let l = grid().prefill(4_000.0);
        assert_eq!(l.ms, 700.0);
        assert!(l.extrapolated);
    }

    #[test]
    fn bilinear_cell_matches_hand_computation() {
        // b=4.5 -> w_b=0.5; t=350 -> w_t=0.25.
        // lo row: 20 + 0.25*10 = 22.5; hi row: 40 + 0.25*40 = 50; blend 36.25.
        let l = grid().decode(4.5, 350.0);
        assert!((l.ms - 36.25).abs() < 1e-12);
    }

    #[test]
    fn llama2_default_prefills_21000_tokens_in_one_second() {
        let p = PairProfile::analytic(21_000.0, 50.0);
        assert!((p.prefill(21_000.0).ms - 1_000.0).abs() < 1e-9);
        assert_eq!(p.decode(1.0, 1.0).ms, 50.0);
    }

    #[test]
    fn default_capacities_lie_in_reported_ranges() {
        let c = Catalog::desk_scale();
        let m = vec![
            TokenMoments {
                mean_input: 2000.0,
                mean_output: 300.0,
                mean_output_sq: 2e5
            };
            4
        ];
        let pm = PerfModel::analytic_default(&c, &m);
        let llama = c.model_id("llama2-70b").unwrap();
        let bloom = c.model_id("bloom-176b").unwrap();
        let a100 = c.gpu_id("a100x8").unwrap();
        let h100 = c.gpu_id("h100x8").unwrap();
        let t = pm.instance_tps(llama, a100).unwrap();
        assert!((68.0..=293.0).contains(&t));
        assert_eq!(t, 180.0);
        assert!((82.0..=397.0).contains(&pm.instance_tps(bloom, h100).unwrap()));
        assert!(matches!(
            pm.instance_tps(ModelId(9), a100),
            Err(PerfError::UnknownPair { .. })
        ));
    }

    #[test]
    fn calibration_inverts_littles_law() {
        let m = TokenMoments {
            mean_input: 1000.0,
            mean_output: 100.0,
            mean_output_sq: 20_000.0,
        };
        let tbt = calibrated_decode_ms(100_000.0, 200.0, &m, 0.7);
        // Resident tokens at lambda = theta / E[I].
        let lambda = 200.0 / 1000.0;
        let resident = lambda * tbt / 1000.0 * (1000.0 * 100.0 + 10_000.0);
        assert!((resident - 70_000.0).abs() < 1e-6);
    }

    #[test]
    fn profile_files_round_trip() {
        let c = Catalog::desk_scale();
        let text = "model,gpu,phase,x1,x2,time_ms\n\
            llama2-70b,a100x8,prefill,1,0,1\nllama2-70b,a100x8,prefill,1000,0,50\n\
            llama2-70b,a100x8,decode,1,1,10\nllama2-70b,a100x8,decode,1,1000,12\n\
            llama2-70b,a100x8,decode,16,1,20\nllama2-70b,a100x8,decode,16,1000,30\n";
        let mut pm = PerfModel::default();
        pm.load_profiles(text.as_bytes(), &c).unwrap();
        pm.load_capacities("model,gpu,tps\nllama2-70b,a100x8,150\n".as_bytes(), &c)
            .unwrap();
        let (m, g) = (ModelId(1), GpuId(0));
        assert_eq!(pm.prefill_time(m, g, 1000).unwrap().ms, 50.0);
        assert_eq!(pm.decode_iteration_time(m, g, 16, 1000).unwrap().ms, 30.0);
        assert_eq!(pm.instance_tps(m, g).unwrap(), 150.0);
        let holey = "model,gpu,phase,x1,x2,time_ms\nllama2-70b,a100x8,prefill,1,0,1\nllama2-70b,a100x8,prefill,2,0,2\nllama2-70b,a100x8,decode,1,1,1\nllama2-70b,a100x8,decode,2,2,1\n";
        assert!(PerfModel::default()
            .load_profiles(holey.as_bytes(), &c)
            .is_err());
    }

    proptest! {
        #[test]
        fn interpolation_is_monotone_and_continuous(
            mut ys in prop::collection::vec(0.0f64..1e4, 3..8),
            x1 in 0.0f64..10_000.0,
            dx in 0.0f64..5_000.0,
        ) {
            ys.sort_by(f64::total_cmp);
            let n = ys.len();
            let xs: Vec<f64> = (0..n).map(|i| i as f64 * 1_000.0).collect();
            let p = PairProfile {
                prefill: xs.iter().copied().zip(ys.iter().copied()).collect(),
                ..PairProfile::analytic(1.0, 1.0)
            };
            prop_assert!(p.prefill(x1 + dx).ms >= p.prefill(x1).ms - 1e-9);
            for k in 1..n - 1 {
                let left = p.prefill(xs[k] - 1e-7).ms;
                let right = p.prefill(xs[k] + 1e-7).ms;
                prop_assert!((left - right).abs() < 1e-3);
                prop_assert!((p.prefill(xs[k]).ms - ys[k]).abs() < 1e-9);
            }
        }
    }
}
