//! Synthetic three-channel data with confounder-dependent covariance and a
//! Monte Carlo harness around the estimators.
//!
//! Each grid value of `z` gets `n` zero-mean Gaussian rows with covariance
//! `Σ_true(z)`. Random draws for grid point `g` of run `r` come from a
//! generator keyed by `(seed, r, g)`, so results do not depend on scheduling.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{tune, CovTarget, LossCurve, MeanStage, TuneConfig};
use crate::condcov::{BandwidthMatrix, CondCovModel};
use crate::dataset::{split, AlignedDataset, DatasetMeta, SplitPlan};
use crate::error::{Error, Result};
use crate::kernel_mean::{ExtrapolationPolicy, MeanModel, MeanSpec};

pub const P: usize = 3;

/// `σ²(z) = base + amplitude / (1 + exp(steepness·(z − center)))`, large at cold `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticVariance {
    pub base: f64,
    pub amplitude: f64,
    pub center: f64,
    pub steepness: f64,
}

impl LogisticVariance {
    pub fn eval(&self, z: f64) -> f64 {
        self.base + self.amplitude / (1.0 + (self.steepness * (z - self.center)).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorrFn {
    Constant {
        value: f64,
    },
    Linear {
        intercept: f64,
        slope: f64,
    },
    /// Moves from `below` (far below `center`) to `above` (far above it).
    Logistic {
        below: f64,
        above: f64,
        center: f64,
        steepness: f64,
    },
}

impl CorrFn {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            CorrFn::Constant { value } => value,
            CorrFn::Linear { intercept, slope } => intercept + slope * z,
            CorrFn::Logistic { below, above, center, steepness } => below + (above - below) / (1.0 + (-steepness * (z - center)).exp()),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, CorrFn::Constant { .. })
    }
}

/// Retention probability ramping linearly from `low_prob` at `z_low` to 1 at `z_high`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThinningSchedule {
    pub low_prob: f64,
    pub z_low: f64,
    pub z_high: f64,
}

impl ThinningSchedule {
    pub fn prob(&self, z: f64) -> f64 {
        if z >= self.z_high {
            1.0
        } else if z <= self.z_low {
            self.low_prob
        } else {
            self.low_prob + (1.0 - self.low_prob) * (z - self.z_low) / (self.z_high - self.z_low)
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.low_prob > 0.0 && self.low_prob <= 1.0) || !(self.z_high > self.z_low) {
            return Err(Error::Scenario(format!("invalid thinning schedule {self:?}")));
        }
        Ok(())
    }
}

impl Default for ThinningSchedule {
    fn default() -> Self {
        Self { low_prob: 0.1, z_low: -5.0, z_high: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZGrid {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl ZGrid {
    pub fn points(&self) -> Vec<f64> {
        let count = ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| self.min + i as f64 * self.step).collect()
    }
}

impl Default for ZGrid {
    fn default() -> Self {
        Self { min: -5.0, max: 20.0, step: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ThinMode {
    /// Keep or drop all replicates of a grid value together.
    #[default]
    GridPoint,
    Row,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub variance: LogisticVariance,
    pub rho12: CorrFn,
    pub rho13: CorrFn,
    pub rho23: CorrFn,
    pub grid: ZGrid,
    /// Replicates per grid value.
    pub n: usize,
    pub thinning: Option<ThinningSchedule>,
    #[serde(default)]
    pub thin_mode: ThinMode,
}

/// Named correlation layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Constant,
    Linear,
    Logistic,
    /// One pair of each shape: ρ12 constant, ρ13 linear, ρ23 logistic.
    Mixed,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "logistic" => Ok(Self::Logistic),
            "mixed" => Ok(Self::Mixed),
            _ => Err(Error::Scenario(format!("unknown scenario `{s}`"))),
        }
    }
}

pub const DEFAULT_VARIANCE: LogisticVariance = LogisticVariance { base: 1.0, amplitude: 3.0, center: 0.0, steepness: 0.6 };
pub const CONSTANT_CORR: CorrFn = CorrFn::Constant { value: 0.5 };
/// 0.8 at −5 falling to 0.3 at 20.
pub const LINEAR_CORR: CorrFn = CorrFn::Linear { intercept: 0.7, slope: -0.02 };
pub const LOGISTIC_CORR: CorrFn = CorrFn::Logistic { below: 0.8, above: 0.3, center: 0.0, steepness: 1.0 };

impl ScenarioSpec {
    pub fn preset(scenario: Scenario, n: usize) -> Self {
        let (a, b, c) = match scenario {
            Scenario::Constant => (CONSTANT_CORR, CONSTANT_CORR, CONSTANT_CORR),
            Scenario::Linear => (LINEAR_CORR, LINEAR_CORR, LINEAR_CORR),
            Scenario::Logistic => (LOGISTIC_CORR, LOGISTIC_CORR, LOGISTIC_CORR),
            Scenario::Mixed => (CONSTANT_CORR, LINEAR_CORR, LOGISTIC_CORR),
        };
        Self {
            variance: DEFAULT_VARIANCE,
            rho12: a,
            rho13: b,
            rho23: c,
            grid: ZGrid::default(),
            n,
            thinning: Some(ThinningSchedule::default()),
            thin_mode: ThinMode::GridPoint,
        }
    }

    pub fn corr_fn(&self, j: usize, k: usize) -> Option<&CorrFn> {
        match (j.min(k), j.max(k)) {
            (0, 1) => Some(&self.rho12),
            (0, 2) => Some(&self.rho13),
            (1, 2) => Some(&self.rho23),
            _ => None,
        }
    }

    /// Checks parameter ranges and PSD-ness of the correlation matrix on the grid.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Scenario("replicates per grid value must be >= 1".into()));
        }
        if !(self.grid.step > 0.0) || !(self.grid.max >= self.grid.min) || !self.grid.min.is_finite() || !self.grid.max.is_finite() {
            return Err(Error::Scenario(format!("invalid z grid {:?}", self.grid)));
        }
        if let Some(t) = &self.thinning {
            t.validate()?;
        }
        for z in self.grid.points() {
            let v = self.variance.eval(z);
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Scenario(format!("variance {v} at z = {z} is not positive")));
            }
            let r = self.corr_matrix(z);
            if r.iter().any(|v| !(v.abs() <= 1.0)) {
                return Err(Error::Scenario(format!("correlation outside [-1, 1] at z = {z}")));
            }
            let min = r.symmetric_eigen().eigenvalues.min();
            if min < -1e-12 {
                return Err(Error::Scenario(format!("correlation matrix not PSD at z = {z} (min eigenvalue {min:e})")));
            }
        }
        Ok(())
    }

    fn corr_matrix(&self, z: f64) -> DMatrix<f64> {
        let (a, b, c) = (self.rho12.eval(z), self.rho13.eval(z), self.rho23.eval(z));
        DMatrix::from_row_slice(3, 3, &[1.0, a, b, a, 1.0, c, b, c, 1.0])
    }

    /// True `(Σ(z), R(z))`.
    pub fn truth(&self, z: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let r = self.corr_matrix(z);
        (r.clone() * self.variance.eval(z), r)
    }

    pub fn retention(&self, z: f64) -> f64 {
        self.thinning.map_or(1.0, |t| t.prob(z))
    }
}

/// Deterministic 64-bit key for `(seed, run, grid index)`.
fn stream_key(seed: u64, run: u64, index: u64) -> u64 {
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    mix(mix(mix(seed) ^ run) ^ index)
}

/// Symmetric square root of a PSD matrix.
fn psd_sqrt(s: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = s.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// One synthetic data set. Timestamps are row positions on the full
/// (unthinned) grid, `g·n + r`.
pub fn sample(spec: &ScenarioSpec, seed: u64, run: u64) -> Result<AlignedDataset> {
    spec.validate()?;
    let n = spec.n;
    let mut ts = Vec::new();
    let mut zs = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (g, z) in spec.grid.points().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_key(seed, run, g as u64));
        let pi = spec.retention(z);
        if spec.thin_mode == ThinMode::GridPoint && pi < 1.0 && !rng.random_bool(pi) {
            continue;
        }
        let root = psd_sqrt(&spec.truth(z).0);
        for r in 0..n {
            let xi = DVector::from_fn(P, |_, _| rng.sample::<f64, _>(StandardNormal));
            if spec.thin_mode == ThinMode::Row && pi < 1.0 && !rng.random_bool(pi) {
                continue;
            }
            let x = &root * xi;
            ts.push((g * n + r) as f64);
            zs.push(z);
            rows.extend(x.iter());
        }
    }
    if zs.len() < 2 {
        return Err(Error::Scenario("thinning left fewer than two rows".into()));
    }
    let x = DMatrix::from_row_slice(zs.len(), P, &rows);
    AlignedDataset::new(ts, zs, x, DatasetMeta::unnamed(P, 1.0))
}

/// Ensemble target id, e.g. `rho12@h=0.5`, `var1@h=inf`, `rho23@tuned`.
pub fn target_id(entry: (usize, usize), bandwidth: Option<f64>) -> String {
    let (j, k) = entry;
    let name = if j == k { format!("var{}", j + 1) } else { format!("rho{}{}", j + 1, k + 1) };
    match bandwidth {
        Some(h) if h.is_infinite() => format!("{name}@h=inf"),
        Some(h) => format!("{name}@h={h}"),
        None => format!("{name}@tuned"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneSetup {
    pub grid: Vec<f64>,
    pub folds: usize,
    pub target: CovTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McConfig {
    pub runs: usize,
    pub seed: u64,
    /// Fixed bandwidths to evaluate; `f64::INFINITY` is the marginal estimator.
    pub bandwidths: Vec<f64>,
    pub eval_z: Vec<f64>,
    pub tune: Option<TuneSetup>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleRecord {
    pub run: usize,
    pub z: f64,
    pub target: String,
    pub estimate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub run: usize,
    pub records: Vec<EnsembleRecord>,
    pub loss_curves: Vec<LossCurve>,
    pub selected: Option<BandwidthMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub target: String,
    pub z: f64,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

impl Ensemble {
    pub fn records(&self) -> impl Iterator<Item = &EnsembleRecord> {
        self.runs.iter().flat_map(|r| &r.records)
    }

    /// Pointwise mean and sample standard deviation across runs, ignoring
    /// non-finite estimates; ordered by target then `z`.
    pub fn summarize(&self) -> Vec<PointSummary> {
        let mut keys: Vec<(String, f64)> = Vec::new();
        let mut acc: std::collections::HashMap<(String, u64), Vec<f64>> = std::collections::HashMap::new();
        for r in self.records() {
            let key = (r.target.clone(), r.z.to_bits());
            let slot = acc.entry(key).or_insert_with(|| {
                keys.push((r.target.clone(), r.z));
                Vec::new()
            });
            if r.estimate.is_finite() {
                slot.push(r.estimate);
            }
        }
        keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
        keys.into_iter()
            .map(|(target, z)| {
                let v = &acc[&(target.clone(), z.to_bits())];
                let count = v.len();
                let mean = v.iter().sum::<f64>() / count as f64;
                let sd = if count > 1 { (v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt() } else { f64::NAN };
                PointSummary { target, z, mean, sd, count }
            })
            .collect()
    }
}

/// Raw `σ̂_jj` and `ρ̂_jk = σ̂_jk / √(σ̂_jj σ̂_kk)` records at each `z`; sparse
/// regions give `NaN`.
fn estimate_records(model: &CondCovModel, run: usize, eval_z: &[f64], bandwidth: Option<f64>, out: &mut Vec<EnsembleRecord>) -> Result<()> {
    for &z in eval_z {
        let s = match model.eval_cov_raw(z) {
            Ok(s) => Some(s),
            Err(Error::SparseRegion { .. }) => None,
            Err(e) => return Err(e),
        };
        for j in 0..P {
            for k in j..P {
                let estimate = match &s {
                    None => f64::NAN,
                    Some(s) if j == k => s[(j, j)],
                    Some(s) => s[(j, k)] / (s[(j, j)] * s[(k, k)]).sqrt(),
                };
                out.push(EnsembleRecord { run, z, target: target_id((j, k), bandwidth), estimate });
            }
        }
    }
    Ok(())
}

/// Zero-mean covariance fit with the mean fixed at zero.
pub fn fit_zero_mean(data: &AlignedDataset, h: &BandwidthMatrix) -> Result<CondCovModel> {
    let mean = MeanModel::fixed(vec![0.0; data.p()]);
    Ok(CondCovModel::from_residuals(data.x().clone(), data.z().to_vec(), mean, h.clone())?.with_policy(ExtrapolationPolicy::Clamp))
}

/// Tunes covariance bandwidths on one data set with the mean fixed at zero.
/// Folds are stratified blocks of one grid value's replicates.
pub fn tune_run(data: &AlignedDataset, spec: &ScenarioSpec, setup: &TuneSetup, seed: u64) -> Result<(Vec<LossCurve>, BandwidthMatrix)> {
    let plan = SplitPlan::kfold(setup.folds, spec.n);
    let folds = split(data, &plan, seed)?;
    let config = TuneConfig {
        grid: setup.grid.clone(),
        mean: MeanStage::Use(MeanSpec::Fixed { values: vec![0.0; data.p()] }),
        cov: Some(setup.target),
        policy: ExtrapolationPolicy::Clamp,
    };
    let result = tune(data, &folds, &config)?;
    let h = result.bandwidths.expect("covariance target requested");
    Ok((result.cov_curves, h))
}

pub fn run_once(spec: &ScenarioSpec, config: &McConfig, run: usize) -> Result<RunResult> {
    let data = sample(spec, config.seed, run as u64)?;
    let mut records = Vec::new();
    for &h in &config.bandwidths {
        let model = fit_zero_mean(&data, &BandwidthMatrix::global(P, h)?)?;
        estimate_records(&model, run, &config.eval_z, Some(h), &mut records)?;
    }
    let (loss_curves, selected) = match &config.tune {
        Some(setup) => {
            let (curves, h) = tune_run(&data, spec, setup, stream_key(config.seed, run as u64, u64::MAX))?;
            let model = fit_zero_mean(&data, &h)?;
            estimate_records(&model, run, &config.eval_z, None, &mut records)?;
            (curves, Some(h))
        }
        None => (Vec::new(), None),
    };
    Ok(RunResult { run, records, loss_curves, selected })
}

/// Runs are independent and evaluated in parallel; output is ordered by run.
pub fn monte_carlo(spec: &ScenarioSpec, config: &McConfig) -> Result<Ensemble> {
    spec.validate()?;
    if config.runs == 0 {
        return Err(Error::Parameter("runs must be >= 1".into()));
    }
    let runs = (0..config.runs).into_par_iter().map(|r| run_once(spec, config, r)).collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unthinned(scenario: Scenario, n: usize) -> ScenarioSpec {
        ScenarioSpec { thinning: None, ..ScenarioSpec::preset(scenario, n) }
    }

    #[test]
    fn grid_has_251_points() {
        let spec = unthinned(Scenario::Constant, 1);
        assert_eq!(spec.grid.points().len(), 251);
        assert_eq!(sample(&spec, 0, 0).unwrap().n(), 251);
    }

    #[test]
    fn zero_correlation_gives_diagonal_truth() {
        let mut spec = unthinned(Scenario::Constant, 1);
        let zero = CorrFn::Constant { value: 0.0 };
        spec.rho12 = zero;
        spec.rho13 = zero;
        spec.rho23 = zero;
        for z in [-5.0, 0.0, 7.3, 20.0] {
            let (s, _) = spec.truth(z);
            assert!(s.iter().enumerate().all(|(i, v)| i % 4 == 0 || *v == 0.0));
        }
    }

    #[test]
    fn thinning_ramp_midpoint() {
        let t = ThinningSchedule::default();
        assert!((t.prob(0.0) - 0.55).abs() < 1e-15);
        assert_eq!(t.prob(-5.0), 0.1);
        assert_eq!(t.prob(5.0), 1.0);
        assert_eq!(t.prob(12.0), 1.0);
    }

    #[test]
    fn logistic_plateaus() {
        let f = LOGISTIC_CORR;
        assert!((f.eval(-40.0) - 0.8).abs() < 1e-6);
        assert!((f.eval(40.0) - 0.3).abs() < 1e-6);
        let v = DEFAULT_VARIANCE;
        assert!((v.eval(-40.0) - (v.base + v.amplitude)).abs() < 1e-6);
        assert!((v.eval(40.0) - v.base).abs() < 1e-6);
    }

    #[test]
    fn linear_preset_endpoints() {
        assert!((LINEAR_CORR.eval(-5.0) - 0.8).abs() < 1e-12);
        assert!((LINEAR_CORR.eval(20.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn presets_are_psd_everywhere() {
        for s in [Scenario::Constant, Scenario::Linear, Scenario::Logistic, Scenario::Mixed] {
            let spec = ScenarioSpec::preset(s, 10);
            spec.validate().unwrap();
            for z in spec.grid.points() {
                assert!(spec.truth(z).0.symmetric_eigen().eigenvalues.min() >= 0.0);
            }
        }
    }

    #[test]
    fn non_psd_combination_rejected() {
        let mut spec = unthinned(Scenario::Constant, 1);
        spec.rho12 = CorrFn::Constant { value: 0.9 };
        spec.rho13 = CorrFn::Constant { value: 0.9 };
        spec.rho23 = CorrFn::Constant { value: -0.9 };
        assert!(matches!(spec.validate(), Err(Error::Scenario(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = ScenarioSpec::preset(Scenario::Logistic, 5);
        let a = sample(&spec, 42, 3).unwrap();
        let b = sample(&spec, 42, 3).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!(a.z(), b.z());
        let c = sample(&spec, 42, 4).unwrap();
        assert_ne!(a.x(), c.x());
    }

    #[test]
    fn row_thinning_mode_differs() {
        let mut spec = ScenarioSpec::preset(Scenario::Logistic, 4);
        let a = sample(&spec, 1, 0).unwrap();
        spec.thin_mode = ThinMode::Row;
        let b = sample(&spec, 1, 0).unwrap();
        assert_ne!(a.n(), b.n());
        // every cold grid value keeps at most n rows under either mode
        assert!(b.z().iter().filter(|&&z| z == -5.0).count() <= 4);
    }

    #[test]
    fn thinning_frequency_matches_schedule() {
        let spec = ScenarioSpec::preset(Scenario::Constant, 1);
        let points = spec.grid.points();
        for (g, &z) in points.iter().enumerate().filter(|(_, z)| **z < 5.0).step_by(7) {
            let kept = (0..1000u64).filter(|&s| sample(&spec, s, 0).unwrap().timestamps().contains(&(g as f64))).count();
            let want = spec.retention(z);
            assert!((kept as f64 / 1000.0 - want).abs() <= 0.05, "z = {z}: {kept} vs {want}");
        }
    }

    #[test]
    fn infinite_bandwidth_is_pooled_covariance() {
        let spec = ScenarioSpec::preset(Scenario::Linear, 3);
        let data = sample(&spec, 7, 0).unwrap();
        let model = fit_zero_mean(&data, &BandwidthMatrix::marginal(P)).unwrap();
        let pooled = data.x().transpose() * data.x() / data.n() as f64;
        for z in [-5.0, 0.0, 20.0] {
            let s = model.eval_cov_raw(z).unwrap();
            assert!((s - &pooled).abs().max() <= 1e-9 * pooled.abs().max());
        }
    }

    #[test]
    fn fixed_z_sample_matches_truth() {
        let mut spec = unthinned(Scenario::Logistic, 100_000);
        spec.grid = ZGrid { min: -1.0, max: -1.0, step: 0.1 };
        let data = sample(&spec, 3, 0).unwrap();
        let n = data.n() as f64;
        let emp = data.x().transpose() * data.x() / n;
        let (truth, _) = spec.truth(-1.0);
        for j in 0..3 {
            for k in 0..3 {
                // Var(x_j x_k) = σ_jj σ_kk + σ_jk² for zero-mean Gaussians
                let se = ((truth[(j, j)] * truth[(k, k)] + truth[(j, k)].powi(2)) / n).sqrt();
                assert!((emp[(j, k)] - truth[(j, k)]).abs() < 3.0 * se, "({j},{k})");
            }
        }
    }

    #[test]
    fn single_run_matches_direct_fit() {
        let spec = ScenarioSpec::preset(Scenario::Mixed, 4);
        let config = McConfig { runs: 1, seed: 5, bandwidths: vec![1.0], eval_z: vec![0.0, 10.0], tune: None };
        let ens = monte_carlo(&spec, &config).unwrap();
        let data = sample(&spec, 5, 0).unwrap();
        let model = fit_zero_mean(&data, &BandwidthMatrix::global(3, 1.0).unwrap()).unwrap();
        let s = model.eval_cov_raw(10.0).unwrap();
        let rec = ens.records().find(|r| r.z == 10.0 && r.target == "rho13@h=1").unwrap();
        assert_eq!(rec.estimate, s[(0, 2)] / (s[(0, 0)] * s[(2, 2)]).sqrt());
        let rec = ens.records().find(|r| r.z == 0.0 && r.target == "var2@h=1").unwrap();
        assert_eq!(rec.estimate, model.eval_cov_raw(0.0).unwrap()[(1, 1)]);
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let spec = ScenarioSpec::preset(Scenario::Logistic, 3);
        let config = McConfig {
            runs: 4,
            seed: 11,
            bandwidths: vec![0.5, f64::INFINITY],
            eval_z: vec![-4.0, 0.0, 15.0],
            tune: Some(TuneSetup { grid: vec![0.5, 1.0, f64::INFINITY], folds: 3, target: CovTarget::CorrelationPerPair }),
        };
        let a = monte_carlo(&spec, &config).unwrap();
        let b = monte_carlo(&spec, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.runs.len(), 4);
        assert!(a.runs.iter().all(|r| r.selected.is_some()));
    }

    #[test]
    fn target_ids() {
        assert_eq!(target_id((0, 1), Some(0.5)), "rho12@h=0.5");
        assert_eq!(target_id((2, 2), Some(f64::INFINITY)), "var3@h=inf");
        assert_eq!(target_id((1, 2), None), "rho23@tuned");
    }
}
