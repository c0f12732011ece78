//! Kernel functions and conditional-mean models `m̂(z)`.
//!
//! Three model kinds are supported: Nadaraya–Watson kernel regression with a
//! bandwidth per channel, a continuous bilinear fit with a fixed breakpoint,
//! and a constant (sample or fixed) mean.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoothing::GroupedSupport;

/// Breakpoint used for bilinear means unless configured otherwise (°C).
pub const DEFAULT_BREAKPOINT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Gaussian,
}

impl KernelFamily {
    /// Unit-bandwidth density `K(u)`.
    pub fn density(self, u: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * PI).sqrt(),
        }
    }

    /// `K(u)` up to its normalizing constant; used for weight ratios.
    #[inline]
    pub(crate) fn unit_shape(self, u: f64) -> f64 {
        match self {
            KernelFamily::Gaussian => (-0.5 * u * u).exp(),
        }
    }

    /// `|u|` beyond which `unit_shape` underflows to zero.
    pub(crate) fn cutoff_radius(self) -> f64 {
        match self {
            KernelFamily::Gaussian => 39.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub bandwidth: f64,
}

impl KernelSpec {
    pub fn gaussian(bandwidth: f64) -> Result<Self> {
        let spec = Self { family: KernelFamily::Gaussian, bandwidth };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bandwidth > 0.0 && self.bandwidth.is_finite() {
            Ok(())
        } else {
            Err(Error::Parameter(format!("bandwidth must be positive and finite, got {}", self.bandwidth)))
        }
    }
}

/// `K_h(u) = K(u/h) / h`.
pub fn kernel_weight(spec: &KernelSpec, u: f64) -> Result<f64> {
    spec.validate()?;
    Ok(spec.family.density(u / spec.bandwidth) / spec.bandwidth)
}

/// What to do when a model is evaluated outside its validity interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExtrapolationPolicy {
    #[default]
    Clamp,
    Error,
}

/// Model kind plus the parameters needed to fit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeanSpec {
    /// Per-channel bandwidths; `f64::INFINITY` gives the sample mean.
    Kernel {
        bandwidths: Vec<f64>,
    },
    Bilinear {
        breakpoint: f64,
    },
    Constant,
    /// Known mean, not estimated from data.
    Fixed {
        values: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct BilinearFit {
    breakpoint: f64,
    /// Per channel: value at the breakpoint, slope below, slope above.
    coefs: Vec<[f64; 3]>,
    /// Inverse Gram matrix of the design, for leverages.
    gram_inv: DMatrix<f64>,
    linear_only: bool,
}

impl BilinearFit {
    fn design_row(&self, z: f64) -> Vec<f64> {
        design_row(self.breakpoint, self.linear_only, z)
    }
}

fn design_row(breakpoint: f64, linear_only: bool, z: f64) -> Vec<f64> {
    let d = z - breakpoint;
    if linear_only {
        vec![1.0, d]
    } else {
        vec![1.0, d.min(0.0), d.max(0.0)]
    }
}

#[derive(Debug, Clone, PartialEq)]
enum MeanFit {
    Kernel { bandwidths: Vec<f64>, support: GroupedSupport },
    Bilinear(BilinearFit),
    Constant { values: Vec<f64>, n: usize },
}

/// Fitted conditional mean. Immutable after construction.
#[derive(Debug, Clone)]
pub struct MeanModel {
    fit: MeanFit,
    p: usize,
    validity: (f64, f64),
    policy: ExtrapolationPolicy,
    family: KernelFamily,
    warned: Arc<AtomicBool>,
}

impl PartialEq for MeanModel {
    fn eq(&self, other: &Self) -> bool {
        self.fit == other.fit && self.p == other.p && self.validity == other.validity && self.policy == other.policy
    }
}

pub fn fit_mean(x: &DMatrix<f64>, z: &[f64], spec: &MeanSpec) -> Result<MeanModel> {
    let n = x.nrows();
    let p = x.ncols();
    if z.len() != n {
        return Err(Error::Shape { what: "confounder series", expected: n, actual: z.len() });
    }
    if p == 0 {
        return Err(Error::Schema("mean model needs at least one channel".into()));
    }
    if !matches!(spec, MeanSpec::Fixed { .. }) && n < 2 {
        return Err(Error::Parameter(format!("mean fit needs n >= 2, got {n}")));
    }
    let validity = if n == 0 {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let fit = match spec {
        MeanSpec::Kernel { bandwidths } => {
            if bandwidths.len() != p {
                return Err(Error::Shape { what: "mean bandwidths", expected: p, actual: bandwidths.len() });
            }
            if let Some(h) = bandwidths.iter().find(|h| !(**h > 0.0) || h.is_nan()) {
                return Err(Error::Parameter(format!("mean bandwidth must be positive, got {h}")));
            }
            let support = GroupedSupport::build(z, p, |i, out| {
                for (k, o) in out.iter_mut().enumerate() {
                    *o = x[(i, k)];
                }
            });
            MeanFit::Kernel { bandwidths: bandwidths.clone(), support }
        }
        MeanSpec::Bilinear { breakpoint } => MeanFit::Bilinear(fit_bilinear(x, z, *breakpoint)?),
        MeanSpec::Constant => {
            let values = (0..p).map(|k| x.column(k).sum() / n as f64).collect();
            MeanFit::Constant { values, n }
        }
        MeanSpec::Fixed { values } => {
            if values.len() != p {
                return Err(Error::Shape { what: "fixed mean", expected: p, actual: values.len() });
            }
            return Ok(MeanModel::fixed(values.clone()));
        }
    };
    Ok(MeanModel {
        fit,
        p,
        validity,
        policy: ExtrapolationPolicy::default(),
        family: KernelFamily::Gaussian,
        warned: Arc::new(AtomicBool::new(false)),
    })
}

fn fit_bilinear(x: &DMatrix<f64>, z: &[f64], breakpoint: f64) -> Result<BilinearFit> {
    if !breakpoint.is_finite() {
        return Err(Error::Parameter(format!("breakpoint must be finite, got {breakpoint}")));
    }
    let both_sides = z.iter().any(|&v| v < breakpoint) && z.iter().any(|&v| v > breakpoint);
    if !both_sides {
        warn!("bilinear mean: no data on one side of breakpoint {breakpoint}; fitting a single line");
    }
    let linear_only = !both_sides;
    let cols = if linear_only { 2 } else { 3 };
    let n = x.nrows();
    let design = DMatrix::from_fn(n, cols, |i, c| design_row(breakpoint, linear_only, z[i])[c]);
    let gram = design.transpose() * &design;
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(min > 1e-12 * max) {
        return Err(Error::Fit { channel: 0, message: "rank-deficient bilinear design".into() });
    }
    let gram_inv = gram
        .cholesky()
        .ok_or_else(|| Error::Fit { channel: 0, message: "bilinear normal equations not positive definite".into() })?
        .inverse();
    let beta = &gram_inv * design.transpose() * x;
    let coefs = (0..x.ncols())
        .map(|k| if linear_only { [beta[(0, k)], beta[(1, k)], beta[(1, k)]] } else { [beta[(0, k)], beta[(1, k)], beta[(2, k)]] })
        .collect::<Vec<_>>();
    if let Some(k) = coefs.iter().position(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::Fit { channel: k, message: "non-finite bilinear coefficients".into() });
    }
    Ok(BilinearFit { breakpoint, coefs, gram_inv, linear_only })
}

impl MeanModel {
    /// Known constant mean valid for every `z`.
    pub fn fixed(values: Vec<f64>) -> Self {
        Self {
            p: values.len(),
            fit: MeanFit::Constant { values, n: 0 },
            validity: (f64::NEG_INFINITY, f64::INFINITY),
            policy: ExtrapolationPolicy::Clamp,
            family: KernelFamily::Gaussian,
            warned: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn with_policy(mut self, policy: ExtrapolationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn validity(&self) -> (f64, f64) {
        self.validity
    }

    pub fn policy(&self) -> ExtrapolationPolicy {
        self.policy
    }

    /// Kind and parameters of this model.
    pub fn spec(&self) -> MeanSpec {
        match &self.fit {
            MeanFit::Kernel { bandwidths, .. } => MeanSpec::Kernel { bandwidths: bandwidths.clone() },
            MeanFit::Bilinear(b) => MeanSpec::Bilinear { breakpoint: b.breakpoint },
            MeanFit::Constant { n: 0, values } => MeanSpec::Fixed { values: values.clone() },
            MeanFit::Constant { .. } => MeanSpec::Constant,
        }
    }

    /// Fitted parametric coefficients: per channel `[value at breakpoint,
    /// slope below, slope above]` for bilinear, `[mean]` for constant kinds.
    pub fn coefficients(&self) -> Option<Vec<Vec<f64>>> {
        match &self.fit {
            MeanFit::Kernel { .. } => None,
            MeanFit::Bilinear(b) => Some(b.coefs.iter().map(|c| c.to_vec()).collect()),
            MeanFit::Constant { values, .. } => Some(values.iter().map(|v| vec![*v]).collect()),
        }
    }

    pub(crate) fn resolve_z(&self, z: f64) -> Result<f64> {
        resolve_z(z, self.validity, self.policy, &self.warned, "mean")
    }

    /// `m̂(z)`.
    pub fn eval(&self, z: f64) -> Result<DVector<f64>> {
        let z = self.resolve_z(z)?;
        Ok(match &self.fit {
            MeanFit::Kernel { bandwidths, support } => {
                let mut sums = vec![0.0; self.p];
                kernel_mean_at(self.family, support, bandwidths, z, &mut sums, None)?
            }
            MeanFit::Bilinear(b) => bilinear_at(b, z),
            MeanFit::Constant { values, .. } => DVector::from_column_slice(values),
        })
    }

    /// Mean at a training row `(z, x)` with that row removed from the fit.
    pub fn eval_excluding(&self, z: f64, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.p {
            return Err(Error::Shape { what: "observation", expected: self.p, actual: x.len() });
        }
        match &self.fit {
            MeanFit::Kernel { bandwidths, support } => {
                let mut sums = vec![0.0; self.p];
                kernel_mean_at(self.family, support, bandwidths, z, &mut sums, Some(x))
            }
            MeanFit::Bilinear(b) => {
                let d = DVector::from_vec(b.design_row(z));
                let leverage = (d.transpose() * &b.gram_inv * &d)[(0, 0)];
                let denom = 1.0 - leverage;
                if !(denom > 1e-12) {
                    return Err(Error::Numeric(format!("leave-one-out leverage {leverage} at z = {z}")));
                }
                let fitted = bilinear_at(b, z);
                Ok(DVector::from_iterator(self.p, (0..self.p).map(|k| x[k] - (x[k] - fitted[k]) / denom)))
            }
            MeanFit::Constant { values, n: 0 } => Ok(DVector::from_column_slice(values)),
            MeanFit::Constant { values, n } => {
                if *n < 2 {
                    return Err(Error::SparseRegion { z, mass: 0.0, floor: 0.0 });
                }
                let n = *n as f64;
                Ok(DVector::from_iterator(self.p, (0..self.p).map(|k| (n * values[k] - x[k]) / (n - 1.0))))
            }
        }
    }

    /// Rows `x_i − m̂(z_i)`.
    pub fn residuals(&self, x: &DMatrix<f64>, z: &[f64]) -> Result<DMatrix<f64>> {
        if x.ncols() != self.p {
            return Err(Error::Shape { what: "mean model channels", expected: self.p, actual: x.ncols() });
        }
        let mut out = x.clone();
        let mut cache: Option<(f64, DVector<f64>)> = None;
        for (i, &zi) in z.iter().enumerate() {
            let m = match &cache {
                Some((zc, m)) if *zc == zi => m.clone(),
                _ => {
                    let m = self.eval(zi)?;
                    cache = Some((zi, m.clone()));
                    m
                }
            };
            for k in 0..self.p {
                out[(i, k)] -= m[k];
            }
        }
        Ok(out)
    }
}

fn bilinear_at(b: &BilinearFit, z: f64) -> DVector<f64> {
    let d = z - b.breakpoint;
    DVector::from_iterator(b.coefs.len(), b.coefs.iter().map(|c| c[0] + c[1] * d.min(0.0) + c[2] * d.max(0.0)))
}

/// Nadaraya–Watson mean per channel, optionally with one row `(z, x)` removed.
fn kernel_mean_at(
    family: KernelFamily,
    support: &GroupedSupport,
    bandwidths: &[f64],
    z: f64,
    sums: &mut [f64],
    exclude: Option<&[f64]>,
) -> Result<DVector<f64>> {
    let p = bandwidths.len();
    let mut out = DVector::zeros(p);
    let n = support.n() - usize::from(exclude.is_some());
    let mut done = vec![false; p];
    for k in 0..p {
        if done[k] {
            continue;
        }
        let h = bandwidths[k];
        let entries: Vec<usize> = (k..p).filter(|&j| bandwidths[j] == h).collect();
        let mut mass = support.accumulate(family, z, h, &entries, sums);
        if let Some(x) = exclude {
            mass -= 1.0;
            for &j in &entries {
                sums[j] -= x[j];
            }
        }
        GroupedSupport::check_mass(family, n, z, h, mass)?;
        for &j in &entries {
            out[j] = sums[j] / mass;
            done[j] = true;
        }
    }
    Ok(out)
}

pub(crate) fn resolve_z(z: f64, validity: (f64, f64), policy: ExtrapolationPolicy, warned: &AtomicBool, what: &str) -> Result<f64> {
    if !z.is_finite() {
        return Err(Error::Parameter(format!("confounder value must be finite, got {z}")));
    }
    let (lo, hi) = validity;
    if z >= lo && z <= hi {
        return Ok(z);
    }
    match policy {
        ExtrapolationPolicy::Error => Err(Error::Extrapolation { z, lo, hi }),
        ExtrapolationPolicy::Clamp => {
            if !warned.swap(true, Ordering::Relaxed) {
                warn!("{what} model evaluated at z = {z} outside [{lo}, {hi}]; clamping");
            }
            Ok(z.clamp(lo, hi))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn gaussian_kernel_values() {
        let k = |h: f64, u: f64| kernel_weight(&KernelSpec::gaussian(h).unwrap(), u).unwrap();
        assert_relative_eq!(k(1.0, 0.0), 0.398942, epsilon = 1e-6);
        assert_relative_eq!(k(2.0, 0.0), 0.199471, epsilon = 1e-6);
        assert_relative_eq!(k(0.5, 1.0), 0.107982, epsilon = 1e-6);
    }

    #[test]
    fn nonpositive_bandwidth_rejected() {
        assert!(matches!(KernelSpec::gaussian(0.0), Err(Error::Parameter(_))));
        assert!(matches!(KernelSpec::gaussian(-1.0), Err(Error::Parameter(_))));
        let bad = KernelSpec { family: KernelFamily::Gaussian, bandwidth: -2.0 };
        assert!(kernel_weight(&bad, 0.0).is_err());
    }

    #[test]
    fn kernel_integrates_to_one() {
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let step = 1e-3;
        let total: f64 = (-10_000..=10_000).map(|i| kernel_weight(&spec, i as f64 * step).unwrap() * step).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }

    proptest! {
        #[test]
        fn kernel_symmetric_with_peak_at_zero(h in 0.01f64..100.0, u in -50.0f64..50.0) {
            let spec = KernelSpec::gaussian(h).unwrap();
            let a = kernel_weight(&spec, u).unwrap();
            prop_assert_eq!(a, kernel_weight(&spec, -u).unwrap());
            prop_assert!(a <= kernel_weight(&spec, 0.0).unwrap());
        }
    }

    #[test]
    fn constant_mean_is_sample_mean() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let m = fit_mean(&x, &[0.0, 1.0], &MeanSpec::Constant).unwrap();
        for z in [0.0, 0.3, 1.0] {
            assert_eq!(m.eval(z).unwrap()[0], 2.0);
        }
    }

    #[test]
    fn kernel_mean_two_points() {
        let x = DMatrix::from_column_slice(2, 1, &[1.0, 3.0]);
        let m = fit_mean(&x, &[0.0, 1.0], &MeanSpec::Kernel { bandwidths: vec![0.5] }).unwrap();
        // weights K_0.5(0) = 0.79788, K_0.5(1) = 0.10798
        assert_relative_eq!(m.eval(0.0).unwrap()[0], 1.23841, epsilon = 1e-5);
    }

    #[test]
    fn huge_bandwidth_gives_sample_mean() {
        let x = DMatrix::from_fn(30, 2, |i, k| ((i * 7 + k * 3) % 11) as f64 - 4.0);
        let z: Vec<f64> = (0..30).map(|i| i as f64 * 0.3).collect();
        let m = fit_mean(&x, &z, &MeanSpec::Kernel { bandwidths: vec![1e9, 1e9] }).unwrap();
        for k in 0..2 {
            let mean = x.column(k).sum() / 30.0;
            for zq in [0.0, 4.2, 8.7] {
                assert!((m.eval(zq).unwrap()[k] - mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn infinite_bandwidth_is_exact_sample_mean() {
        let x = DMatrix::from_fn(10, 1, |i, _| i as f64);
        let z: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = fit_mean(&x, &z, &MeanSpec::Kernel { bandwidths: vec![f64::INFINITY] }).unwrap();
        assert_eq!(m.eval(3.3).unwrap()[0], 4.5);
    }

    #[test]
    fn repeated_value_model_is_constant() {
        let x = DMatrix::from_element(12, 1, 2.75);
        let z: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let m = fit_mean(&x, &z, &MeanSpec::Kernel { bandwidths: vec![0.6] }).unwrap();
        for zq in [0.0, 0.5, 5.25, 11.0] {
            assert_relative_eq!(m.eval(zq).unwrap()[0], 2.75, epsilon = 1e-14);
        }
    }

    #[test]
    fn kernel_mean_is_lipschitz_on_scan() {
        let x = DMatrix::from_fn(40, 1, |i, _| (i as f64 * 0.9).sin() * 3.0);
        let z: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let m = fit_mean(&x, &z, &MeanSpec::Kernel { bandwidths: vec![0.4] }).unwrap();
        let step = 0.01;
        let grid: Vec<f64> = (0..976).map(|i| i as f64 * step).collect();
        let vals: Vec<f64> = grid.iter().map(|&g| m.eval(g).unwrap()[0]).collect();
        let lipschitz = vals.windows(2).map(|w| (w[1] - w[0]).abs() / step).fold(0.0, f64::max) * 2.0;
        for &g in grid.iter().step_by(37) {
            let d = (m.eval(g + 1e-6).unwrap()[0] - m.eval(g).unwrap()[0]).abs();
            assert!(d <= lipschitz * 1e-6, "jump {d} at {g}");
        }
    }

    #[test]
    fn equal_confounder_gives_arithmetic_mean() {
        let x = DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 4.0, 9.0]);
        let m = fit_mean(&x, &[3.0; 4], &MeanSpec::Kernel { bandwidths: vec![0.1] }).unwrap();
        assert_eq!(m.eval(3.0).unwrap()[0], 4.0);
    }

    proptest! {
        #[test]
        fn kernel_mean_permutation_invariant(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng, seq::SliceRandom};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = 15;
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let xp = DMatrix::from_fn(n, 2, |i, k| x[(perm[i], k)]);
            let zp: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
            let spec = MeanSpec::Kernel { bandwidths: vec![0.7, 1.3] };
            let a = fit_mean(&x, &z, &spec).unwrap();
            let b = fit_mean(&xp, &zp, &spec).unwrap();
            for q in [0.0, 1.7, 4.9] {
                let (ma, mb) = (a.eval(q).unwrap(), b.eval(q).unwrap());
                for k in 0..2 {
                    prop_assert!((ma[k] - mb[k]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn bilinear_recovers_exact_kink() {
        let z: Vec<f64> = (0..60).map(|i| -5.0 + i as f64 * 0.5).collect();
        let truth = |zz: f64, k: usize| {
            let (b, sl, sr) = if k == 0 { (4.0, -0.3, 0.05) } else { (-1.0, 1.2, -0.7) };
            let d = zz - 2.0;
            b + sl * d.min(0.0) + sr * d.max(0.0)
        };
        let x = DMatrix::from_fn(60, 2, |i, k| truth(z[i], k));
        let m = fit_mean(&x, &z, &MeanSpec::Bilinear { breakpoint: 2.0 }).unwrap();
        let c = m.coefficients().unwrap();
        assert!((c[0][1] + 0.3).abs() < 1e-8 && (c[0][2] - 0.05).abs() < 1e-8);
        assert!((c[1][1] - 1.2).abs() < 1e-8 && (c[1][2] + 0.7).abs() < 1e-8);
        assert!((c[0][0] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn bilinear_is_continuous_at_breakpoint() {
        let z: Vec<f64> = (0..30).map(|i| i as f64 * 0.4 - 3.0).collect();
        let x = DMatrix::from_fn(30, 1, |i, _| (z[i] * 1.7).cos());
        let m = fit_mean(&x, &z, &MeanSpec::Bilinear { breakpoint: 2.0 }).unwrap();
        let c = &m.coefficients().unwrap()[0];
        let below = c[0] + c[1] * 0.0;
        let above = c[0] + c[2] * 0.0;
        assert_eq!(below, above);
        let eps = 1e-9;
        assert!((m.eval(2.0 - eps).unwrap()[0] - m.eval(2.0 + eps).unwrap()[0]).abs() < 1e-8);
    }

    #[test]
    fn bilinear_degrades_to_line_when_one_sided() {
        let z: Vec<f64> = (0..10).map(|i| 3.0 + i as f64).collect();
        let x = DMatrix::from_fn(10, 1, |i, _| 2.0 * z[i] + 1.0);
        let m = fit_mean(&x, &z, &MeanSpec::Bilinear { breakpoint: 2.0 }).unwrap();
        let c = &m.coefficients().unwrap()[0];
        assert!((c[1] - 2.0).abs() < 1e-10 && (c[2] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn bilinear_rank_deficient_is_fit_error() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let err = fit_mean(&x, &[5.0; 3], &MeanSpec::Bilinear { breakpoint: 2.0 }).unwrap_err();
        assert!(matches!(err, Error::Fit { channel: 0, .. }), "{err}");
    }

    #[test]
    fn extrapolation_policy() {
        let x = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 3.0]);
        let z = [0.0, 1.0, 2.0];
        let spec = MeanSpec::Kernel { bandwidths: vec![0.5] };
        let m = fit_mean(&x, &z, &spec).unwrap();
        assert_eq!(m.eval(10.0).unwrap(), m.eval(2.0).unwrap());
        let strict = m.with_policy(ExtrapolationPolicy::Error);
        assert!(matches!(strict.eval(10.0), Err(Error::Extrapolation { .. })));
    }

    #[test]
    fn leave_one_out_matches_refit() {
        let z: Vec<f64> = (0..25).map(|i| (i as f64 * 0.83).sin() * 6.0 + 1.0).collect();
        let x = DMatrix::from_fn(25, 2, |i, k| z[i] * (k as f64 + 0.5) + ((i * 13 % 7) as f64) * 0.1);
        for spec in [MeanSpec::Kernel { bandwidths: vec![0.9, 2.0] }, MeanSpec::Bilinear { breakpoint: 2.0 }, MeanSpec::Constant] {
            let full = fit_mean(&x, &z, &spec).unwrap();
            for i in [0usize, 7, 24] {
                let keep: Vec<usize> = (0..25).filter(|&r| r != i).collect();
                let xr = DMatrix::from_fn(24, 2, |r, k| x[(keep[r], k)]);
                let zr: Vec<f64> = keep.iter().map(|&r| z[r]).collect();
                let refit = fit_mean(&xr, &zr, &spec).unwrap().with_policy(ExtrapolationPolicy::Clamp);
                let row: Vec<f64> = x.row(i).iter().copied().collect();
                let loo = full.eval_excluding(z[i], &row).unwrap();
                let want = match spec {
                    // refit validity may shrink; evaluate the refit exactly at z_i
                    MeanSpec::Kernel { .. } | MeanSpec::Constant => refit.eval(z[i].clamp(refit.validity().0, refit.validity().1)).unwrap(),
                    _ => {
                        let c = refit.coefficients().unwrap();
                        let d = z[i] - 2.0;
                        DVector::from_iterator(2, c.iter().map(|c| c[0] + c[1] * d.min(0.0) + c[2] * d.max(0.0)))
                    }
                };
                if matches!(spec, MeanSpec::Kernel { .. }) && (z[i] < refit.validity().0 || z[i] > refit.validity().1) {
                    continue;
                }
                for k in 0..2 {
                    assert!((loo[k] - want[k]).abs() < 1e-9, "{spec:?} row {i}: {} vs {}", loo[k], want[k]);
                }
            }
        }
    }
}
