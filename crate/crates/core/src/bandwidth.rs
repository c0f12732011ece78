//! Bandwidth selection by validation loss over a candidate grid.
//!
//! Tuning runs in two stages: per-channel mean bandwidths first, then
//! covariance bandwidths with the fold means frozen. Losses are averaged over
//! folds; a holdout split is a single fold.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condcov::{BandwidthMatrix, CondCovModel};
use crate::dataset::{AlignedDataset, Fold};
use crate::error::{Error, Result};
use crate::kernel_mean::{fit_mean, ExtrapolationPolicy, MeanModel, MeanSpec};

/// Default candidate grid; the last entry is the equal-weight estimator.
pub const DEFAULT_GRID: [f64; 10] = [0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.5, 5.0, f64::INFINITY];

/// Relative tolerance under which two losses count as tied.
const TIE_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    pub target: String,
    pub candidates: Vec<f64>,
    pub losses: Vec<f64>,
    pub argmin: usize,
}

impl LossCurve {
    /// Drops candidates with non-finite loss and picks the minimum, breaking
    /// ties toward the larger bandwidth.
    pub fn new(target: impl Into<String>, candidates: &[f64], losses: &[f64]) -> Result<Self> {
        let target = target.into();
        let mut c = Vec::new();
        let mut l = Vec::new();
        for (&h, &q) in candidates.iter().zip(losses) {
            if q.is_finite() {
                c.push(h);
                l.push(q);
            } else {
                warn!("{target}: dropping bandwidth {h} with non-finite loss");
            }
        }
        if c.is_empty() {
            return Err(Error::Tuning(target));
        }
        let mut argmin = 0;
        for i in 1..l.len() {
            if l[i] <= l[argmin] + TIE_REL * l[argmin].abs() {
                argmin = i;
            }
        }
        Ok(Self { target, candidates: c, losses: l, argmin })
    }

    pub fn selected(&self) -> f64 {
        self.candidates[self.argmin]
    }
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Parameter("bandwidth grid is empty".into()));
    }
    if let Some(h) = grid.iter().find(|h| !(**h > 0.0)) {
        return Err(Error::Parameter(format!("bandwidth grid entries must be positive, got {h}")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("bandwidth grid must be strictly ascending".into()));
    }
    Ok(())
}

/// How the mean is obtained before covariance tuning.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanStage {
    /// Tune a kernel bandwidth per channel on the grid.
    Tune,
    /// Fit this spec on each training fold.
    Use(MeanSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovTarget {
    /// One bandwidth per entry `(j,k)` from the loss on residual products.
    PerPair,
    /// One bandwidth for the whole matrix from the summed loss.
    Global,
    /// Variances per channel as in `PerPair`; each correlation bandwidth from
    /// the loss on standardized residual products against `ρ̂_jk(z; h)`.
    CorrelationPerPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneConfig {
    pub grid: Vec<f64>,
    pub mean: MeanStage,
    pub cov: Option<CovTarget>,
    pub policy: ExtrapolationPolicy,
}

impl TuneConfig {
    pub fn new(grid: Vec<f64>) -> Self {
        Self { grid, mean: MeanStage::Tune, cov: Some(CovTarget::PerPair), policy: ExtrapolationPolicy::Clamp }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub mean_curves: Vec<LossCurve>,
    pub mean_spec: MeanSpec,
    pub cov_curves: Vec<LossCurve>,
    pub bandwidths: Option<BandwidthMatrix>,
}

impl TuneResult {
    pub fn curves(&self) -> impl Iterator<Item = &LossCurve> {
        self.mean_curves.iter().chain(&self.cov_curves)
    }
}

/// Validation rows with confounder values clamped into the training range.
struct Validation {
    x: DMatrix<f64>,
    /// Distinct clamped `z` values and each row's index into them.
    zs: Vec<f64>,
    slot: Vec<usize>,
}

fn prepare_validation(train: &AlignedDataset, val: &AlignedDataset, policy: ExtrapolationPolicy) -> Result<Validation> {
    if train.p() != val.p() {
        return Err(Error::Shape { what: "validation channels", expected: train.p(), actual: val.p() });
    }
    if val.n() == 0 {
        return Err(Error::Parameter("validation set is empty".into()));
    }
    let (lo, hi) = train.z_range().ok_or_else(|| Error::Parameter("training set is empty".into()))?;
    let mut outside = 0usize;
    let mut clamped = Vec::with_capacity(val.n());
    for &z in val.z() {
        if z < lo || z > hi {
            if policy == ExtrapolationPolicy::Error {
                return Err(Error::Coverage { z, lo, hi });
            }
            outside += 1;
        }
        clamped.push(z.clamp(lo, hi));
    }
    if outside > 0 {
        warn!("{outside} validation rows outside training range [{lo}, {hi}]; clamping");
    }
    let mut zs = clamped.clone();
    zs.sort_by(f64::total_cmp);
    zs.dedup();
    let slot = clamped.iter().map(|z| zs.partition_point(|v| v < z)).collect();
    Ok(Validation { x: val.x().clone(), zs, slot })
}

/// Per-channel squared error of a kernel mean with bandwidth `h`; `None` when
/// some validation point falls in a sparse region.
fn mean_sse(train: &AlignedDataset, val: &Validation, h: f64) -> Result<Option<Vec<f64>>> {
    let p = train.p();
    let model = fit_mean(train.x(), train.z(), &MeanSpec::Kernel { bandwidths: vec![h; p] })?;
    let mut means = Vec::with_capacity(val.zs.len());
    for &z in &val.zs {
        match model.eval(z) {
            Ok(m) => means.push(m),
            Err(Error::SparseRegion { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    let mut sse = vec![0.0; p];
    for (i, &s) in val.slot.iter().enumerate() {
        for (k, acc) in sse.iter_mut().enumerate() {
            let d = val.x[(i, k)] - means[s][k];
            *acc += d * d;
        }
    }
    Ok(Some(sse))
}

/// Raw `Σ̂(z; h)` from training residuals at each distinct validation `z`.
fn cov_at(train_resid: &DMatrix<f64>, train_z: &[f64], zs: &[f64], h: f64) -> Result<Option<Vec<DMatrix<f64>>>> {
    let p = train_resid.ncols();
    let model = CondCovModel::from_residuals(
        train_resid.clone(),
        train_z.to_vec(),
        MeanModel::fixed(vec![0.0; p]),
        BandwidthMatrix::global(p, h)?,
    )?;
    let mut out = Vec::with_capacity(zs.len());
    for &z in zs {
        match model.eval_cov_raw(z) {
            Ok(s) => out.push(s),
            Err(Error::SparseRegion { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
    }
    Ok(Some(out))
}

/// `Q_σjk` for every entry, given validation residuals.
fn cov_sse(val_resid: &DMatrix<f64>, slot: &[usize], sigma: &[DMatrix<f64>]) -> DMatrix<f64> {
    let p = val_resid.ncols();
    let mut q = DMatrix::zeros(p, p);
    for (i, &s) in slot.iter().enumerate() {
        for j in 0..p {
            for k in j..p {
                let d = val_resid[(i, j)] * val_resid[(i, k)] - sigma[s][(j, k)];
                q[(j, k)] += d * d;
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            q[(j, k)] = q[(k, j)];
        }
    }
    q
}

/// `Q_mk(h)` on one train/validation pair.
pub fn mean_loss(train: &AlignedDataset, validation: &AlignedDataset, channel: usize, h: f64, policy: ExtrapolationPolicy) -> Result<f64> {
    if channel >= train.p() {
        return Err(Error::Shape { what: "channel index", expected: train.p(), actual: channel });
    }
    let val = prepare_validation(train, validation, policy)?;
    Ok(mean_sse(train, &val, h)?.map_or(f64::NAN, |s| s[channel]))
}

fn fold_residuals(
    train: &AlignedDataset,
    validation: &AlignedDataset,
    mean: &MeanModel,
    policy: ExtrapolationPolicy,
) -> Result<(DMatrix<f64>, DMatrix<f64>, Validation)> {
    let val = prepare_validation(train, validation, policy)?;
    let train_resid = mean.residuals(train.x(), train.z())?;
    let val_resid = mean.residuals(validation.x(), validation.z())?;
    Ok((train_resid, val_resid, val))
}

/// `Q_σjk(h)` on one train/validation pair with a frozen mean.
pub fn cov_loss(
    train: &AlignedDataset,
    validation: &AlignedDataset,
    pair: (usize, usize),
    h: f64,
    mean: &MeanModel,
    policy: ExtrapolationPolicy,
) -> Result<f64> {
    let p = train.p();
    if pair.0 >= p || pair.1 >= p {
        return Err(Error::Shape { what: "channel pair", expected: p, actual: pair.0.max(pair.1) });
    }
    let (tr, vr, val) = fold_residuals(train, validation, mean, policy)?;
    Ok(cov_at(&tr, train.z(), &val.zs, h)?.map_or(f64::NAN, |s| cov_sse(&vr, &val.slot, &s)[pair]))
}

/// `Q_Σ(h)`: squared error summed over all `p²` entries.
pub fn cov_loss_global(
    train: &AlignedDataset,
    validation: &AlignedDataset,
    h: f64,
    mean: &MeanModel,
    policy: ExtrapolationPolicy,
) -> Result<f64> {
    let (tr, vr, val) = fold_residuals(train, validation, mean, policy)?;
    let Some(sigma) = cov_at(&tr, train.z(), &val.zs, h)? else {
        return Ok(f64::NAN);
    };
    let mut total = 0.0;
    for (i, &s) in val.slot.iter().enumerate() {
        let r = vr.row(i).transpose();
        let d = &r * r.transpose() - &sigma[s];
        total += d.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

fn channel_name(k: usize) -> String {
    format!("m{}", k + 1)
}

fn entry_name(prefix: &str, j: usize, k: usize) -> String {
    format!("{prefix}{}{}", j + 1, k + 1)
}

struct FoldState {
    train: AlignedDataset,
    validation: AlignedDataset,
}

/// Grid search over `folds` (from [`crate::dataset::split`]).
pub fn tune(data: &AlignedDataset, folds: &[Fold], config: &TuneConfig) -> Result<TuneResult> {
    validate_grid(&config.grid)?;
    if folds.is_empty() {
        return Err(Error::Parameter("no folds to tune on".into()));
    }
    let p = data.p();
    let grid = &config.grid;
    let states: Vec<FoldState> = folds
        .iter()
        .map(|f| {
            let (train, validation) = f.materialize(data);
            FoldState { train, validation }
        })
        .collect();
    let k_folds = states.len() as f64;

    let (mean_curves, mean_spec) = match &config.mean {
        MeanStage::Use(spec) => (Vec::new(), spec.clone()),
        MeanStage::Tune => {
            let vals: Vec<Validation> =
                states.iter().map(|s| prepare_validation(&s.train, &s.validation, config.policy)).collect::<Result<_>>()?;
            // losses[h][k], averaged over folds
            let losses: Vec<Vec<f64>> = grid
                .par_iter()
                .map(|&h| {
                    let mut acc = vec![0.0; p];
                    for (s, v) in states.iter().zip(&vals) {
                        match mean_sse(&s.train, v, h)? {
                            Some(sse) => acc.iter_mut().zip(sse).for_each(|(a, q)| *a += q / k_folds),
                            None => return Ok(vec![f64::NAN; p]),
                        }
                    }
                    Ok(acc)
                })
                .collect::<Result<_>>()?;
            let curves: Vec<LossCurve> = (0..p)
                .map(|k| LossCurve::new(channel_name(k), grid, &losses.iter().map(|l| l[k]).collect::<Vec<_>>()))
                .collect::<Result<_>>()?;
            let bandwidths = curves.iter().map(LossCurve::selected).collect();
            (curves, MeanSpec::Kernel { bandwidths })
        }
    };

    let Some(target) = config.cov else {
        return Ok(TuneResult { mean_curves, mean_spec, cov_curves: Vec::new(), bandwidths: None });
    };

    // Frozen per-fold means and residuals.
    struct CovFold {
        train_z: Vec<f64>,
        train_resid: DMatrix<f64>,
        val_resid: DMatrix<f64>,
        val: Validation,
    }
    let cov_folds: Vec<CovFold> = states
        .iter()
        .map(|s| {
            let mean = fit_mean(s.train.x(), s.train.z(), &mean_spec)?.with_policy(config.policy);
            let (train_resid, val_resid, val) = fold_residuals(&s.train, &s.validation, &mean, config.policy)?;
            Ok(CovFold { train_z: s.train.z().to_vec(), train_resid, val_resid, val })
        })
        .collect::<Result<_>>()?;

    // q[h] = fold-averaged Q_σjk matrix
    let q: Vec<Option<DMatrix<f64>>> = grid
        .par_iter()
        .map(|&h| {
            let mut acc = DMatrix::zeros(p, p);
            for f in &cov_folds {
                match cov_at(&f.train_resid, &f.train_z, &f.val.zs, h)? {
                    Some(sigma) => acc += cov_sse(&f.val_resid, &f.val.slot, &sigma) / k_folds,
                    None => return Ok(None),
                }
            }
            Ok(Some(acc))
        })
        .collect::<Result<_>>()?;
    let entry_losses = |j: usize, k: usize| -> Vec<f64> { q.iter().map(|m| m.as_ref().map_or(f64::NAN, |m| m[(j, k)])).collect() };

    let mut cov_curves = Vec::new();
    let mut hm = DMatrix::from_element(p, p, f64::NAN);
    match target {
        CovTarget::Global => {
            let losses: Vec<f64> = q.iter().map(|m| m.as_ref().map_or(f64::NAN, |m| m.sum())).collect();
            let curve = LossCurve::new("sigma", grid, &losses)?;
            hm.fill(curve.selected());
            cov_curves.push(curve);
        }
        CovTarget::PerPair => {
            for j in 0..p {
                for k in j..p {
                    let curve = LossCurve::new(entry_name("sigma", j, k), grid, &entry_losses(j, k))?;
                    hm[(j, k)] = curve.selected();
                    hm[(k, j)] = curve.selected();
                    cov_curves.push(curve);
                }
            }
        }
        CovTarget::CorrelationPerPair => {
            for j in 0..p {
                let curve = LossCurve::new(entry_name("sigma", j, j), grid, &entry_losses(j, j))?;
                hm[(j, j)] = curve.selected();
                cov_curves.push(curve);
            }
            let diag_h: Vec<f64> = (0..p).map(|j| hm[(j, j)]).collect();
            let corr = corr_losses(
                &cov_folds.iter().map(|f| (&f.train_resid, &f.train_z[..], &f.val_resid, &f.val)).collect::<Vec<_>>(),
                &diag_h,
                grid,
            )?;
            for j in 0..p {
                for k in j + 1..p {
                    let losses: Vec<f64> = corr.iter().map(|m| m.as_ref().map_or(f64::NAN, |m| m[(j, k)])).collect();
                    let curve = LossCurve::new(entry_name("rho", j, k), grid, &losses)?;
                    hm[(j, k)] = curve.selected();
                    hm[(k, j)] = curve.selected();
                    cov_curves.push(curve);
                }
            }
        }
    }
    Ok(TuneResult { mean_curves, mean_spec, cov_curves, bandwidths: Some(BandwidthMatrix::new(hm)?) })
}

/// Training residuals, training `z`, validation residuals and validation rows of one fold.
type FoldResiduals<'a> = (&'a DMatrix<f64>, &'a [f64], &'a DMatrix<f64>, &'a Validation);

/// Fold-averaged correlation-scale losses for every candidate.
///
/// Validation residuals are standardized by `σ̂_j(z)` fitted on the training
/// fold with that channel's selected variance bandwidth.
fn corr_losses(
    folds: &[FoldResiduals<'_>],
    diag_h: &[f64],
    grid: &[f64],
) -> Result<Vec<Option<DMatrix<f64>>>> {
    let p = diag_h.len();
    let k_folds = folds.len() as f64;
    // standardized validation residuals per fold
    let mut scaled = Vec::with_capacity(folds.len());
    for (tr, tz, vr, val) in folds {
        let mut sd = vec![vec![0.0; p]; val.zs.len()];
        for j in 0..p {
            let sigma = cov_at(tr, tz, &val.zs, diag_h[j])?.ok_or_else(|| Error::Tuning(entry_name("sigma", j, j)))?;
            for (s, m) in sigma.iter().enumerate() {
                let v = m[(j, j)];
                if !(v > 0.0) {
                    return Err(Error::DegenerateChannel { channel: j, z: val.zs[s] });
                }
                sd[s][j] = v.sqrt();
            }
        }
        let u = DMatrix::from_fn(vr.nrows(), p, |i, j| vr[(i, j)] / sd[val.slot[i]][j]);
        scaled.push(u);
    }
    grid.par_iter()
        .map(|&h| {
            let mut acc = DMatrix::zeros(p, p);
            for ((tr, tz, _, val), u) in folds.iter().zip(&scaled) {
                let Some(sigma) = cov_at(tr, tz, &val.zs, h)? else {
                    return Ok(None);
                };
                for (i, &s) in val.slot.iter().enumerate() {
                    let m = &sigma[s];
                    for j in 0..p {
                        for k in j + 1..p {
                            let denom = (m[(j, j)] * m[(k, k)]).sqrt();
                            if !(denom > 0.0) {
                                return Ok(None);
                            }
                            let d = u[(i, j)] * u[(i, k)] - m[(j, k)] / denom;
                            acc[(j, k)] += d * d / k_folds;
                        }
                    }
                }
            }
            Ok(Some(acc))
        })
        .collect()
}
