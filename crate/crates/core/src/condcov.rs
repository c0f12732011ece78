//! Conditional covariance `Σ̂(z)` from kernel-weighted residual outer products.

use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_mean::{resolve_z, ExtrapolationPolicy, KernelFamily, MeanModel};
use crate::smoothing::GroupedSupport;

/// Eigenvalues below `-CLIP_REL_TOL · Σ|λ|` trigger clip-eigen repair.
pub const CLIP_REL_TOL: f64 = 1e-10;
/// Condition number above which inversion adds jitter.
pub const MAX_CONDITION: f64 = 1e12;
/// Inversion jitter is `JITTER_REL · trace / p`.
pub const JITTER_REL: f64 = 1e-10;

/// Symmetric matrix of per-entry bandwidths `h_jk`; `f64::INFINITY` marks the
/// equal-weight (marginal) estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct BandwidthMatrix {
    h: DMatrix<f64>,
}

impl BandwidthMatrix {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() == 0 {
            return Err(Error::Shape { what: "bandwidth matrix", expected: h.nrows(), actual: h.ncols() });
        }
        for j in 0..h.nrows() {
            for k in 0..h.ncols() {
                let v = h[(j, k)];
                if !(v > 0.0) {
                    return Err(Error::Parameter(format!("bandwidth h[{j},{k}] must be positive, got {v}")));
                }
                if v != h[(k, j)] {
                    return Err(Error::Parameter(format!("bandwidth matrix not symmetric at ({j},{k})")));
                }
            }
        }
        Ok(Self { h })
    }

    pub fn global(p: usize, h: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(p, p, h))
    }

    pub fn marginal(p: usize) -> Self {
        Self { h: DMatrix::from_element(p, p, f64::INFINITY) }
    }

    pub fn p(&self) -> usize {
        self.h.nrows()
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.h[(j, k)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.h
    }
}

impl TryFrom<Vec<Vec<f64>>> for BandwidthMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let p = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() != p) {
            return Err(Error::Shape { what: "bandwidth matrix row", expected: p, actual: r.len() });
        }
        Self::new(DMatrix::from_fn(p, p, |j, k| rows[j][k]))
    }
}

impl From<BandwidthMatrix> for Vec<Vec<f64>> {
    fn from(b: BandwidthMatrix) -> Self {
        b.h.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PsdPolicy {
    /// Zero negative eigenvalues (nearest PSD matrix in Frobenius norm).
    #[default]
    ClipEigen,
    /// Shift the spectrum so the smallest eigenvalue is at least `floor`.
    Jitter { floor: f64 },
    /// Return raw estimates.
    Off,
}

/// Repairs a symmetric matrix to be positive semidefinite.
///
/// Clip-eigen leaves matrices whose negative eigenvalues are within rounding
/// (`CLIP_REL_TOL` relative to `Σ|λ|`) untouched. Jitter adds `floor·I` when
/// the smallest eigenvalue is in `[0, floor)`, and shifts it up to `floor`
/// when it is negative.
pub fn repair_psd(s: &DMatrix<f64>, policy: PsdPolicy) -> Result<DMatrix<f64>> {
    let asym = max_asymmetry(s);
    let scale = s.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if asym > 1e-10 * scale {
        return Err(Error::Asymmetric(asym));
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite covariance entry".into()));
    }
    match policy {
        PsdPolicy::Off => Ok(s.clone()),
        PsdPolicy::ClipEigen => {
            let eig = s.clone().symmetric_eigen();
            let abs_sum: f64 = eig.eigenvalues.iter().map(|v| v.abs()).sum();
            if eig.eigenvalues.min() >= -CLIP_REL_TOL * abs_sum {
                return Ok(s.clone());
            }
            let clipped = eig.eigenvalues.map(|v| v.max(0.0));
            let out = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            Ok(symmetrize(out))
        }
        PsdPolicy::Jitter { floor } => {
            if !(floor >= 0.0) {
                return Err(Error::Parameter(format!("jitter floor must be nonnegative, got {floor}")));
            }
            let min = s.clone().symmetric_eigen().eigenvalues.min();
            if min >= floor {
                return Ok(s.clone());
            }
            let shift = if min >= 0.0 { floor } else { floor - min };
            Ok(s + DMatrix::identity(s.nrows(), s.ncols()) * shift)
        }
    }
}

fn max_asymmetry(s: &DMatrix<f64>) -> f64 {
    if s.nrows() != s.ncols() {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for j in 0..s.nrows() {
        for k in j + 1..s.ncols() {
            worst = worst.max((s[(j, k)] - s[(k, j)]).abs());
        }
    }
    worst
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// Converts a covariance matrix to correlations, clipped to `[-1, 1]`.
pub fn cov_to_corr(s: &DMatrix<f64>, z: f64) -> Result<DMatrix<f64>> {
    let p = s.nrows();
    let sd: Vec<f64> = (0..p)
        .map(|j| {
            let v = s[(j, j)];
            if v > 0.0 {
                Ok(v.sqrt())
            } else {
                Err(Error::DegenerateChannel { channel: j, z })
            }
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(p, p, |j, k| if j == k { 1.0 } else { (s[(j, k)] / (sd[j] * sd[k])).clamp(-1.0, 1.0) }))
}

/// Cholesky factor of a covariance matrix, adding `JITTER_REL·trace/p` to the
/// diagonal when the condition number exceeds `MAX_CONDITION`.
pub fn cholesky_jittered(s: &DMatrix<f64>, z: f64) -> Result<Cholesky<f64, Dyn>> {
    let p = s.nrows();
    let eig = s.clone().symmetric_eigen();
    let (min, max) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    let well_conditioned = min > 0.0 && max / min <= MAX_CONDITION;
    let m = if well_conditioned {
        s.clone()
    } else {
        let trace = s.trace();
        if !(trace > 0.0) {
            return Err(Error::Singular { z });
        }
        s + DMatrix::identity(p, p) * (JITTER_REL * trace / p as f64)
    };
    m.cholesky().ok_or(Error::Singular { z })
}

/// Upper-triangular `(j, k)` pairs, `j ≤ k`, in packed order.
fn packed_entries(p: usize) -> Vec<(usize, usize)> {
    (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).collect()
}

/// Fitted conditional covariance model. Immutable after construction.
#[derive(Debug, Clone)]
pub struct CondCovModel {
    residuals: DMatrix<f64>,
    z: Vec<f64>,
    support: GroupedSupport,
    bandwidths: BandwidthMatrix,
    /// Distinct bandwidths and the packed entries that use each.
    entry_groups: Vec<(f64, Vec<usize>)>,
    mean: MeanModel,
    validity: (f64, f64),
    policy: ExtrapolationPolicy,
    psd: PsdPolicy,
    family: KernelFamily,
    warned: Arc<AtomicBool>,
}

/// Stores residuals `x_i − m̂(z_i)` from `mean` and prepares kernel sums.
pub fn fit_condcov(x: &DMatrix<f64>, z: &[f64], mean: &MeanModel, h: &BandwidthMatrix) -> Result<CondCovModel> {
    let p = x.ncols();
    if mean.p() != p {
        return Err(Error::Shape { what: "mean model channels", expected: p, actual: mean.p() });
    }
    if h.p() != p {
        return Err(Error::Shape { what: "bandwidth matrix", expected: p, actual: h.p() });
    }
    if z.len() != x.nrows() {
        return Err(Error::Shape { what: "confounder series", expected: x.nrows(), actual: z.len() });
    }
    if x.nrows() < 2 {
        return Err(Error::Parameter(format!("covariance fit needs n >= 2, got {}", x.nrows())));
    }
    let residuals = mean.residuals(x, z)?;
    CondCovModel::from_residuals(residuals, z.to_vec(), mean.clone(), h.clone())
}

impl CondCovModel {
    pub fn from_residuals(residuals: DMatrix<f64>, z: Vec<f64>, mean: MeanModel, h: BandwidthMatrix) -> Result<Self> {
        let p = residuals.ncols();
        if h.p() != p || mean.p() != p {
            return Err(Error::Shape { what: "covariance model channels", expected: p, actual: h.p() });
        }
        if z.len() != residuals.nrows() || z.is_empty() {
            return Err(Error::Shape { what: "confounder series", expected: residuals.nrows(), actual: z.len() });
        }
        let entries = packed_entries(p);
        let support = GroupedSupport::build(&z, entries.len(), |i, out| {
            for (e, &(j, k)) in entries.iter().enumerate() {
                out[e] = residuals[(i, j)] * residuals[(i, k)];
            }
        });
        let mut entry_groups: Vec<(f64, Vec<usize>)> = Vec::new();
        for (e, &(j, k)) in entries.iter().enumerate() {
            let hv = h.get(j, k);
            match entry_groups.iter_mut().find(|(g, _)| *g == hv) {
                Some((_, list)) => list.push(e),
                None => entry_groups.push((hv, vec![e])),
            }
        }
        let validity = (support.z_min(), support.z_max());
        Ok(Self {
            residuals,
            z,
            support,
            bandwidths: h,
            entry_groups,
            mean,
            validity,
            policy: ExtrapolationPolicy::default(),
            psd: PsdPolicy::default(),
            family: KernelFamily::Gaussian,
            warned: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn with_policy(mut self, policy: ExtrapolationPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_psd_policy(mut self, psd: PsdPolicy) -> Self {
        self.psd = psd;
        self
    }

    pub fn p(&self) -> usize {
        self.residuals.ncols()
    }

    pub fn n(&self) -> usize {
        self.residuals.nrows()
    }

    pub fn residuals(&self) -> &DMatrix<f64> {
        &self.residuals
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn bandwidths(&self) -> &BandwidthMatrix {
        &self.bandwidths
    }

    pub fn mean(&self) -> &MeanModel {
        &self.mean
    }

    pub fn validity(&self) -> (f64, f64) {
        self.validity
    }

    pub fn psd_policy(&self) -> PsdPolicy {
        self.psd
    }

    pub fn extrapolation_policy(&self) -> ExtrapolationPolicy {
        self.policy
    }

    /// Unrepaired `Σ̂(z)`; entry `(j,k)` uses bandwidth `h_jk`.
    pub fn eval_cov_raw(&self, z: f64) -> Result<DMatrix<f64>> {
        let z = resolve_z(z, self.validity, self.policy, &self.warned, "covariance")?;
        self.kernel_cov(z, None)
    }

    /// `Σ̂(z)` after the configured PSD repair.
    pub fn eval_cov(&self, z: f64) -> Result<DMatrix<f64>> {
        repair_psd(&self.eval_cov_raw(z)?, self.psd)
    }

    pub fn eval_corr(&self, z: f64) -> Result<DMatrix<f64>> {
        cov_to_corr(&self.eval_cov(z)?, z)
    }

    /// Repaired `Σ̂(z_i)` with training row `i` removed from every kernel sum.
    pub fn eval_cov_excluding(&self, row: usize) -> Result<DMatrix<f64>> {
        if row >= self.n() {
            return Err(Error::Shape { what: "training row index", expected: self.n(), actual: row });
        }
        let r: Vec<f64> = self.residuals.row(row).iter().copied().collect();
        repair_psd(&self.kernel_cov(self.z[row], Some(&r))?, self.psd)
    }

    fn kernel_cov(&self, z: f64, exclude: Option<&[f64]>) -> Result<DMatrix<f64>> {
        let p = self.p();
        let entries = packed_entries(p);
        let mut sums = vec![0.0; entries.len()];
        let mut packed = vec![0.0; entries.len()];
        let n = self.n() - usize::from(exclude.is_some());
        for (h, list) in &self.entry_groups {
            let mut mass = self.support.accumulate(self.family, z, *h, list, &mut sums);
            if let Some(r) = exclude {
                mass -= 1.0;
                for &e in list {
                    let (j, k) = entries[e];
                    sums[e] -= r[j] * r[k];
                }
            }
            GroupedSupport::check_mass(self.family, n, z, *h, mass)?;
            for &e in list {
                packed[e] = sums[e] / mass;
            }
        }
        let mut s = DMatrix::zeros(p, p);
        for (e, &(j, k)) in entries.iter().enumerate() {
            s[(j, k)] = packed[e];
            s[(k, j)] = packed[e];
        }
        Ok(s)
    }
}
