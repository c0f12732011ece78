//! Squared conditional Mahalanobis distances, χ² thresholds, Phase I
//! leave-one-out calibration and Phase II monitoring.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::condcov::{cholesky_jittered, fit_condcov, BandwidthMatrix, CondCovModel, PsdPolicy};
use crate::dataset::AlignedDataset;
use crate::error::{Error, Result};
use crate::kernel_mean::{fit_mean, ExtrapolationPolicy, MeanModel, MeanSpec};

pub const DEFAULT_QUANTILE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Marginal mean and covariance.
    None,
    /// Conditional mean, marginal covariance of its residuals.
    #[serde(alias = "mean")]
    MeanOnly,
    /// Conditional mean and conditional covariance.
    Full,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::None, Regime::MeanOnly, Regime::Full];

    pub fn name(self) -> &'static str {
        match self {
            Regime::None => "none",
            Regime::MeanOnly => "mean_only",
            Regime::Full => "full",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "mean" | "mean_only" => Ok(Self::MeanOnly),
            "full" => Ok(Self::Full),
            _ => Err(Error::Parameter(format!("unknown regime `{s}` (expected none, mean, full)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    I,
    II,
}

/// Mean and covariance models for one regime.
#[derive(Debug, Clone)]
pub struct RegimeModels {
    pub regime: Regime,
    pub mean: MeanModel,
    pub cov: CondCovModel,
}

/// Fits the models a regime needs. `mean_spec` and `h` are ignored where the
/// regime uses marginal estimates.
pub fn fit_regime(
    data: &AlignedDataset,
    regime: Regime,
    mean_spec: &MeanSpec,
    h: &BandwidthMatrix,
    psd: PsdPolicy,
) -> Result<RegimeModels> {
    let p = data.p();
    let spec = if regime == Regime::None { MeanSpec::Constant } else { mean_spec.clone() };
    let mean = fit_mean(data.x(), data.z(), &spec)?;
    let bw = if regime == Regime::Full { h.clone() } else { BandwidthMatrix::marginal(p) };
    let cov = fit_condcov(data.x(), data.z(), &mean, &bw)?.with_psd_policy(psd);
    Ok(RegimeModels { regime, mean, cov })
}

impl RegimeModels {
    pub fn with_policy(mut self, policy: ExtrapolationPolicy) -> Self {
        self.mean = self.mean.with_policy(policy);
        self.cov = self.cov.with_policy(policy);
        self
    }
}

/// `rᵀ Σ⁻¹ r` through a jittered Cholesky solve.
pub fn mahalanobis(r: &DVector<f64>, sigma: &DMatrix<f64>, z: f64) -> Result<f64> {
    if r.len() != sigma.nrows() {
        return Err(Error::Shape { what: "residual", expected: sigma.nrows(), actual: r.len() });
    }
    let chol = cholesky_jittered(sigma, z)?;
    let y = chol.l().solve_lower_triangular(r).ok_or(Error::Singular { z })?;
    Ok(y.norm_squared())
}

/// Squared distance of `x` from `m(z)` under `Σ(z)`.
pub fn cmd(x: &[f64], z: f64, mean: &MeanModel, cov: &CondCovModel) -> Result<f64> {
    if x.len() != mean.p() {
        return Err(Error::Shape { what: "observation", expected: mean.p(), actual: x.len() });
    }
    let r = DVector::from_column_slice(x) - mean.eval(z)?;
    mahalanobis(&r, &cov.eval_cov(z)?, z)
}

/// Quantile `q` of χ²(dof).
pub fn chi2_threshold(dof: usize, q: f64) -> Result<f64> {
    if dof == 0 {
        return Err(Error::Parameter("chi-squared degrees of freedom must be >= 1".into()));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Parameter(format!("quantile must be in (0, 1), got {q}")));
    }
    let dist = ChiSquared::new(dof as f64).map_err(|e| Error::Numeric(e.to_string()))?;
    Ok(dist.inverse_cdf(q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticPoint {
    pub timestamp: f64,
    pub z: f64,
    pub d2: f64,
    pub alarm: bool,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticSeries {
    pub regime: Regime,
    pub threshold: f64,
    pub dof: usize,
    pub points: Vec<DiagnosticPoint>,
}

impl DiagnosticSeries {
    fn build(regime: Regime, threshold: f64, dof: usize, data: &AlignedDataset, d2: Vec<f64>, phase: Phase) -> Self {
        let points = d2
            .into_iter()
            .enumerate()
            .map(|(i, d2)| DiagnosticPoint { timestamp: data.timestamps()[i], z: data.z()[i], d2, alarm: d2 > threshold, phase })
            .collect();
        Self { regime, threshold, dof, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Concatenates `other` after `self`; both must share regime and threshold.
    pub fn extend(&mut self, other: DiagnosticSeries) {
        self.points.extend(other.points);
    }
}

/// Leave-one-out Phase I distances on the data the models were fitted on.
///
/// Row `i` is removed from the kernel sums of the mean and covariance. Under
/// regime `none` this is the classical statistic: mean and covariance (divided
/// by `n − 1`) of the other rows.
pub fn phase1_loo(data: &AlignedDataset, models: &RegimeModels, quantile: f64) -> Result<DiagnosticSeries> {
    let p = data.p();
    let n = data.n();
    if models.cov.n() != n || models.cov.p() != p {
        return Err(Error::Shape { what: "Phase I rows (models must be fitted on this data)", expected: models.cov.n(), actual: n });
    }
    let threshold = chi2_threshold(p, quantile)?;
    let x = data.x();
    let z = data.z();
    let resid = models.cov.residuals();
    // marginal scatter n·S for the classical case
    let scatter = resid.transpose() * resid;
    let nf = n as f64;
    let d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            let r_i = resid.row(i).transpose();
            let (m, sigma) = match models.regime {
                Regime::None => {
                    if n < 3 {
                        return Err(Error::SparseRegion { z: z[i], mass: (n - 1) as f64, floor: 2.0 });
                    }
                    let m = models.mean.eval_excluding(z[i], &row)?;
                    let s = (&scatter - &r_i * r_i.transpose() * (nf / (nf - 1.0))) / (nf - 1.0);
                    (m, crate::condcov::repair_psd(&s, models.cov.psd_policy())?)
                }
                Regime::MeanOnly | Regime::Full => (models.mean.eval_excluding(z[i], &row)?, models.cov.eval_cov_excluding(i)?),
            };
            let r = DVector::from_vec(row) - m;
            mahalanobis(&r, &sigma, z[i])
        })
        .collect::<Result<_>>()?;
    Ok(DiagnosticSeries::build(models.regime, threshold, p, data, d2, Phase::I))
}

/// Phase II distances against frozen models; nothing is refitted.
pub fn monitor(data: &AlignedDataset, models: &RegimeModels, threshold: f64) -> Result<DiagnosticSeries> {
    let p = models.mean.p();
    if data.n() > 0 && data.p() != p {
        return Err(Error::Shape { what: "Phase II channels", expected: p, actual: data.p() });
    }
    if !(threshold > 0.0) {
        return Err(Error::Parameter(format!("threshold must be positive, got {threshold}")));
    }
    let d2: Vec<f64> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let row: Vec<f64> = data.x().row(i).iter().copied().collect();
            cmd(&row, data.z()[i], &models.mean, &models.cov)
        })
        .collect::<Result<_>>()?;
    Ok(DiagnosticSeries::build(models.regime, threshold, p, data, d2, Phase::II))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlarmReport {
    pub regime: Regime,
    pub threshold: f64,
    pub dof: usize,
    pub rate_overall: Option<f64>,
    pub rate_below_split: Option<f64>,
    pub rate_above_split: Option<f64>,
    pub n: usize,
}

fn rate<'a>(points: impl Iterator<Item = &'a DiagnosticPoint>) -> Option<f64> {
    let (mut total, mut alarms) = (0usize, 0usize);
    for p in points {
        total += 1;
        alarms += usize::from(p.alarm);
    }
    (total > 0).then(|| alarms as f64 / total as f64)
}

/// Alarm fractions overall and for `z < z_split` / `z ≥ z_split`; empty groups give `None`.
pub fn alarm_report(series: &DiagnosticSeries, z_split: f64) -> AlarmReport {
    let pts = &series.points;
    AlarmReport {
        regime: series.regime,
        threshold: series.threshold,
        dof: series.dof,
        rate_overall: rate(pts.iter()),
        rate_below_split: rate(pts.iter().filter(|p| p.z < z_split)),
        rate_above_split: rate(pts.iter().filter(|p| p.z >= z_split)),
        n: pts.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_data(n: usize, p: usize, seed: u64) -> AlignedDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let z = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
        AlignedDataset::from_xz(x, z).unwrap()
    }

    #[test]
    fn chi2_quantiles() {
        let q = chi2_threshold(8, 0.99).unwrap();
        assert!((q - 20.090235).abs() < 1e-6 * q, "{q}");
        assert_eq!(q.round(), 20.0);
        let one_sigma = statrs::function::erf::erf(1.0 / 2f64.sqrt());
        assert!((chi2_threshold(1, one_sigma).unwrap() - 1.0).abs() < 1e-6);
        let two = -2.0 * 0.01f64.ln();
        assert!((chi2_threshold(2, 0.99).unwrap() - two).abs() < 1e-6 * two);
        assert!((chi2_threshold(3, 0.99).unwrap() - 11.344867).abs() < 1e-5);
        assert!(chi2_threshold(2, 1.0).is_err());
        assert!(chi2_threshold(2, 0.0).is_err());
        assert!(chi2_threshold(0, 0.5).is_err());
    }

    #[test]
    fn distance_examples() {
        let i2 = DMatrix::identity(2, 2);
        assert_eq!(mahalanobis(&DVector::from_vec(vec![3.0, 4.0]), &i2, 0.0).unwrap(), 25.0);
        assert_eq!(mahalanobis(&DVector::zeros(2), &i2, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn matches_solve_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose() + DMatrix::identity(4, 4) * 0.1;
            let r = DVector::from_fn(4, |_, _| rng.random_range(-3.0..3.0));
            let want = r.dot(&s.clone().lu().solve(&r).unwrap());
            let got = mahalanobis(&r, &s, 0.0).unwrap();
            assert!((got - want).abs() <= 1e-10 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn invariant_under_diagonal_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let s = &a * a.transpose() + DMatrix::identity(3, 3) * 0.2;
            let r = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let d = DMatrix::from_diagonal(&DVector::from_fn(3, |_, _| rng.random_range(0.1..10.0)));
            let base = mahalanobis(&r, &s, 0.0).unwrap();
            let scaled = mahalanobis(&(&d * &r), &(&d * &s * &d), 0.0).unwrap();
            assert!((base - scaled).abs() <= 1e-9 * base);
        }
    }

    #[test]
    fn increases_along_ray() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        let v = DVector::from_vec(vec![0.4, -1.1]);
        let mut last = 0.0;
        for t in 1..50 {
            let d = mahalanobis(&(&v * (t as f64 * 0.1)), &s, 0.0).unwrap();
            assert!(d > last);
            last = d;
        }
    }

    #[test]
    fn singular_beyond_jitter() {
        let s = DMatrix::zeros(2, 2);
        assert!(matches!(mahalanobis(&DVector::from_vec(vec![1.0, 0.0]), &s, 3.0), Err(Error::Singular { .. })));
    }

    #[test]
    fn classical_loo_matches_oracle() {
        let data = normal_data(60, 3, 4);
        let models = fit_regime(&data, Regime::None, &MeanSpec::Constant, &BandwidthMatrix::marginal(3), PsdPolicy::ClipEigen).unwrap();
        let series = phase1_loo(&data, &models, 0.99).unwrap();
        let x = data.x();
        for i in 0..60 {
            let others: Vec<usize> = (0..60).filter(|&r| r != i).collect();
            let mut mean = DVector::zeros(3);
            for &r in &others {
                mean += x.row(r).transpose();
            }
            mean /= 59.0;
            let mut s = DMatrix::zeros(3, 3);
            for &r in &others {
                let d = x.row(r).transpose() - &mean;
                s += &d * d.transpose();
            }
            s /= 59.0;
            let d = x.row(i).transpose() - &mean;
            let want = d.dot(&s.lu().solve(&d).unwrap());
            assert!((series.points[i].d2 - want).abs() <= 1e-9 * want.max(1.0), "row {i}");
        }
    }

    #[test]
    fn classical_loo_calibrated_on_normal_data() {
        let data = normal_data(5000, 2, 5);
        let models = fit_regime(&data, Regime::None, &MeanSpec::Constant, &BandwidthMatrix::marginal(2), PsdPolicy::ClipEigen).unwrap();
        let rate = alarm_report(&phase1_loo(&data, &models, 0.99).unwrap(), 5.0).rate_overall.unwrap();
        assert!((0.005..=0.02).contains(&rate), "{rate}");
    }

    #[test]
    fn duplicated_rows_share_loo_result() {
        let base = normal_data(30, 2, 6);
        let mut x = base.x().clone().insert_row(30, 0.0);
        x.set_row(30, &base.x().row(7));
        let mut z = base.z().to_vec();
        z.push(base.z()[7]);
        let data = AlignedDataset::from_xz(x, z).unwrap();
        for regime in Regime::ALL {
            let h = BandwidthMatrix::global(2, 1.5).unwrap();
            let models = fit_regime(&data, regime, &MeanSpec::Kernel { bandwidths: vec![1.5, 1.5] }, &h, PsdPolicy::ClipEigen).unwrap();
            let s = phase1_loo(&data, &models, 0.99).unwrap();
            assert!((s.points[7].d2 - s.points[30].d2).abs() <= 1e-12 * s.points[7].d2.max(1.0), "{regime:?}");
        }
    }

    #[test]
    fn loo_full_regime_matches_refit_without_row() {
        let data = normal_data(40, 2, 8);
        let spec = MeanSpec::Kernel { bandwidths: vec![2.0, 2.0] };
        let h = BandwidthMatrix::global(2, 2.0).unwrap();
        let models = fit_regime(&data, Regime::Full, &spec, &h, PsdPolicy::ClipEigen).unwrap();
        let s = phase1_loo(&data, &models, 0.99).unwrap();
        // mean refit without row i; covariance keeps the fit-time residuals of the others
        let i = 13;
        let keep: Vec<usize> = (0..40).filter(|&r| r != i).collect();
        let sub = data.subset(&keep);
        let mean = fit_mean(sub.x(), sub.z(), &spec).unwrap().with_policy(ExtrapolationPolicy::Clamp);
        let resid = models.cov.residuals();
        let kept_resid = DMatrix::from_fn(39, 2, |r, k| resid[(keep[r], k)]);
        let cov = CondCovModel::from_residuals(kept_resid, sub.z().to_vec(), mean.clone(), h).unwrap();
        let zi = data.z()[i];
        let (lo, hi) = cov.validity();
        if (lo..=hi).contains(&zi) {
            let want = cmd(&data.row(i), zi, &mean, &cov).unwrap();
            assert!((s.points[i].d2 - want).abs() <= 1e-10 * want.max(1.0));
        }
    }

    #[test]
    fn monitor_and_report() {
        let data = normal_data(2000, 2, 9);
        let (phase1, phase2) = (data.subset(&(0..1000).collect::<Vec<_>>()), data.subset(&(1000..2000).collect::<Vec<_>>()));
        let models = fit_regime(&phase1, Regime::None, &MeanSpec::Constant, &BandwidthMatrix::marginal(2), PsdPolicy::ClipEigen).unwrap();
        let thr = chi2_threshold(2, 0.99).unwrap();
        let r1 = alarm_report(&phase1_loo(&phase1, &models, 0.99).unwrap(), 5.0).rate_overall.unwrap();
        let same = monitor(&phase1, &models, thr).unwrap();
        let r_same = alarm_report(&same, 5.0).rate_overall.unwrap();
        assert!((r1 - r_same).abs() <= 0.02);
        assert!(same.points.iter().all(|p| p.phase == Phase::II));

        let mut shifted = phase2.x().clone();
        shifted.column_mut(0).add_scalar_mut(5.0);
        let shifted = AlignedDataset::from_xz(shifted, phase2.z().to_vec()).unwrap();
        let r = alarm_report(&monitor(&shifted, &models, thr).unwrap(), 5.0).rate_overall.unwrap();
        assert!(r > 0.9, "{r}");

        let empty = AlignedDataset::new(vec![], vec![], DMatrix::zeros(0, 2), crate::dataset::DatasetMeta::unnamed(2, 1.0)).unwrap();
        assert!(monitor(&empty, &models, thr).unwrap().is_empty());
        let other = normal_data(10, 3, 1);
        assert!(matches!(monitor(&other, &models, thr), Err(Error::Shape { .. })));
    }

    fn series_from(d2: &[f64], z: &[f64], threshold: f64) -> DiagnosticSeries {
        DiagnosticSeries {
            regime: Regime::Full,
            threshold,
            dof: 2,
            points: d2
                .iter()
                .zip(z)
                .map(|(&d2, &z)| DiagnosticPoint { timestamp: 0.0, z, d2, alarm: d2 > threshold, phase: Phase::I })
                .collect(),
        }
    }

    #[test]
    fn report_counts() {
        let s = series_from(&[1.0; 5], &[0.0, 1.0, 2.0, 3.0, 4.0], 9.0);
        let r = alarm_report(&s, 2.0);
        assert_eq!((r.rate_overall, r.rate_below_split, r.rate_above_split), (Some(0.0), Some(0.0), Some(0.0)));

        let mut d2 = vec![1.0; 15];
        d2[0] = 50.0;
        d2[4] = 50.0;
        let z: Vec<f64> = (0..15).map(|i| if i < 10 { -1.0 } else { 5.0 }).collect();
        let r = alarm_report(&series_from(&d2, &z, 9.0), 2.0);
        assert_eq!(r.rate_below_split, Some(0.2));
        assert_eq!(r.rate_above_split, Some(0.0));
        assert_eq!(r.n, 15);
    }
}
