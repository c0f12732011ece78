//! Conditional PCA: eigendecomposition of `Σ̂(z)`, standardized conditional
//! scores, per-bin score diagnostics and reconstruction.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::condcov::CondCovModel;
use crate::error::{Error, Result};
use crate::kernel_mean::MeanModel;

/// Eigenvalues below `LAMBDA_FLOOR_REL · trace` cannot be whitened.
pub const LAMBDA_FLOOR_REL: f64 = 1e-12;
pub const DEFAULT_SCORE_BINS: usize = 6;
/// Bins with fewer rows are merged into a neighbour.
pub const MIN_BIN_ROWS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct CondEigen {
    pub z: f64,
    /// Descending.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal columns; column `c` pairs with eigenvalue `c`.
    pub vectors: DMatrix<f64>,
}

/// Makes the largest-magnitude entry positive; ties go to the first entry.
fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Eigendecomposition of a symmetric matrix with descending eigenvalues and
/// sign-fixed eigenvectors.
pub fn eigen_decomp(s: &DMatrix<f64>, z: f64) -> Result<CondEigen> {
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite covariance at z = {z}")));
    }
    let eig = s.clone().symmetric_eigen();
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("eigendecomposition failed at z = {z}")));
    }
    let p = s.nrows();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = DVector::from_iterator(p, order.iter().map(|&c| eig.eigenvalues[c]));
    let mut vectors = DMatrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        fix_sign(&mut v);
        vectors.set_column(dst, &v);
    }
    Ok(CondEigen { z, eigenvalues, vectors })
}

/// Decomposition of the repaired `Σ̂(z)`.
pub fn cond_eigen(cov: &CondCovModel, z: f64) -> Result<CondEigen> {
    eigen_decomp(&cov.eval_cov(z)?, z)
}

/// Decompositions along ascending `zs` with components matched to the
/// previous point by maximal `|a_j(z)·a_k(z+δ)|` instead of eigenvalue rank.
/// Signs follow the previous point.
pub fn track_components(cov: &CondCovModel, zs: &[f64]) -> Result<Vec<CondEigen>> {
    let mut out: Vec<CondEigen> = Vec::with_capacity(zs.len());
    for &z in zs {
        let cur = cond_eigen(cov, z)?;
        let Some(prev) = out.last() else {
            out.push(cur);
            continue;
        };
        let p = cur.eigenvalues.len();
        let overlap = prev.vectors.transpose() * &cur.vectors;
        let mut taken = vec![false; p];
        let mut eigenvalues = DVector::zeros(p);
        let mut vectors = DMatrix::zeros(p, p);
        for j in 0..p {
            let k = (0..p)
                .filter(|&k| !taken[k])
                .max_by(|&a, &b| overlap[(j, a)].abs().total_cmp(&overlap[(j, b)].abs()).then(b.cmp(&a)))
                .expect("one column left per row");
            taken[k] = true;
            let sign = if overlap[(j, k)] < 0.0 { -1.0 } else { 1.0 };
            eigenvalues[j] = cur.eigenvalues[k];
            vectors.set_column(j, &(cur.vectors.column(k) * sign));
        }
        out.push(CondEigen { z, eigenvalues, vectors });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    /// `n × components.len()`.
    pub scores: DMatrix<f64>,
    pub z: Vec<f64>,
    /// Component indices (0-based eigenvalue rank) of the columns.
    pub components: Vec<usize>,
}

/// Decompositions at each distinct `z`, computed once.
fn decompose_all(cov: &CondCovModel, z: &[f64]) -> Result<HashMap<u64, CondEigen>> {
    let mut distinct: Vec<f64> = z.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let decomps = distinct.par_iter().map(|&zv| cond_eigen(cov, zv)).collect::<Result<Vec<_>>>()?;
    Ok(distinct.iter().map(|v| v.to_bits()).zip(decomps).collect())
}

fn check_component(e: &CondEigen, c: usize) -> Result<f64> {
    let trace: f64 = e.eigenvalues.sum();
    let floor = LAMBDA_FLOOR_REL * trace;
    let lambda = e.eigenvalues[c];
    if lambda > floor {
        Ok(lambda)
    } else {
        Err(Error::DegenerateComponent { component: c, z: e.z, eigenvalue: lambda, floor })
    }
}

/// `s_i = Λ̂(z_i)^{-1/2} Â(z_i)ᵀ (x_i − m̂(z_i))`, restricted to `components`.
pub fn cond_scores(x: &DMatrix<f64>, z: &[f64], mean: &MeanModel, cov: &CondCovModel, components: &[usize]) -> Result<ScoreMatrix> {
    let p = cov.p();
    if x.ncols() != p {
        return Err(Error::Shape { what: "observation channels", expected: p, actual: x.ncols() });
    }
    if z.len() != x.nrows() {
        return Err(Error::Shape { what: "confounder series", expected: x.nrows(), actual: z.len() });
    }
    if let Some(&c) = components.iter().find(|&&c| c >= p) {
        return Err(Error::Parameter(format!("component index {c} out of range for p = {p}")));
    }
    let decomps = decompose_all(cov, z)?;
    let resid = mean.residuals(x, z)?;
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let e = &decomps[&z[i].to_bits()];
            let r = resid.row(i).transpose();
            components.iter().map(|&c| Ok(e.vectors.column(c).dot(&r) / check_component(e, c)?.sqrt())).collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let m = components.len();
    let scores = DMatrix::from_fn(x.nrows(), m, |i, c| rows[i][c]);
    Ok(ScoreMatrix { scores, z: z.to_vec(), components: components.to_vec() })
}

/// `x̂_i = m̂(z_i) + Σ_c a_c(z_i) √λ_c(z_i) s_ic` over score columns not in `drop`.
pub fn reconstruct(scores: &ScoreMatrix, mean: &MeanModel, cov: &CondCovModel, drop: &[usize]) -> Result<DMatrix<f64>> {
    let p = cov.p();
    let n = scores.z.len();
    let decomps = decompose_all(cov, &scores.z)?;
    let rows: Vec<DVector<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let z = scores.z[i];
            let e = &decomps[&z.to_bits()];
            let mut x = mean.eval(z)?;
            for (col, &c) in scores.components.iter().enumerate() {
                if drop.contains(&c) {
                    continue;
                }
                let lambda = check_component(e, c)?;
                x += e.vectors.column(c) * (lambda.sqrt() * scores.scores[(i, col)]);
            }
            Ok(x)
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(n, p, |i, k| rows[i][k]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinStats {
    pub z_lo: f64,
    pub z_hi: f64,
    pub count: usize,
    pub mean: Vec<f64>,
    /// Sample standard deviation (divisor `count − 1`).
    pub sd: Vec<f64>,
    /// Pairwise correlations `(a, b, r)` with `a < b`; `None` when a column is constant.
    pub corr: Vec<(usize, usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreDiagnostics {
    pub bins: Vec<BinStats>,
    /// Per column: `sup |F_n − Φ|` against the standard normal.
    pub ks_gap: Vec<f64>,
}

impl ScoreDiagnostics {
    /// Largest `|mean|`, `|sd − 1|` and `|corr|` over all bins and columns.
    pub fn worst(&self) -> (f64, f64, f64) {
        let mut w = (0.0f64, 0.0f64, 0.0f64);
        for b in &self.bins {
            w.0 = b.mean.iter().fold(w.0, |m, v| m.max(v.abs()));
            w.1 = b.sd.iter().fold(w.1, |m, v| m.max((v - 1.0).abs()));
            w.2 = b.corr.iter().filter_map(|c| c.2).fold(w.2, |m, v| m.max(v.abs()));
        }
        w
    }
}

/// Equal-count bin boundaries over sorted `z` (as row-index ranges into the
/// sort order). Equal `z` values never straddle a boundary; undersized bins
/// are merged into their neighbour.
fn equal_count_bins(sorted_z: &[f64], bins: usize) -> Vec<(usize, usize)> {
    let n = sorted_z.len();
    let mut cuts = vec![0];
    for b in 1..bins {
        let mut c = (b * n) / bins;
        while c > 0 && c < n && sorted_z[c] == sorted_z[c - 1] {
            c += 1;
        }
        if c > *cuts.last().unwrap() && c < n {
            cuts.push(c);
        }
    }
    cuts.push(n);
    let mut ranges: Vec<(usize, usize)> = cuts.windows(2).map(|w| (w[0], w[1])).collect();
    while ranges.len() > 1 {
        let Some(small) = ranges.iter().position(|r| r.1 - r.0 < MIN_BIN_ROWS) else {
            break;
        };
        let merge_with = if small + 1 < ranges.len() { small + 1 } else { small - 1 };
        let (a, b) = (small.min(merge_with), small.max(merge_with));
        ranges[a] = (ranges[a].0, ranges[b].1);
        ranges.remove(b);
    }
    ranges
}

/// Per-bin mean, spread and correlation of score columns, plus a normality gap per column.
pub fn score_diagnostics(scores: &DMatrix<f64>, z: &[f64], bins: usize) -> Result<ScoreDiagnostics> {
    if bins < 2 {
        return Err(Error::Parameter(format!("score diagnostics need at least 2 bins, got {bins}")));
    }
    if z.len() != scores.nrows() {
        return Err(Error::Shape { what: "confounder series", expected: scores.nrows(), actual: z.len() });
    }
    let m = scores.ncols();
    let mut order: Vec<usize> = (0..z.len()).collect();
    order.sort_by(|&a, &b| z[a].total_cmp(&z[b]).then(a.cmp(&b)));
    let sorted_z: Vec<f64> = order.iter().map(|&i| z[i]).collect();
    let stats = if z.is_empty() { Vec::new() } else { equal_count_bins(&sorted_z, bins) }
        .into_iter()
        .map(|(lo, hi)| {
            let rows = &order[lo..hi];
            let count = rows.len() as f64;
            let mean: Vec<f64> = (0..m).map(|c| rows.iter().map(|&i| scores[(i, c)]).sum::<f64>() / count).collect();
            let cov = |a: usize, b: usize| {
                rows.iter().map(|&i| (scores[(i, a)] - mean[a]) * (scores[(i, b)] - mean[b])).sum::<f64>() / (count - 1.0)
            };
            let constant: Vec<bool> = (0..m).map(|c| rows.iter().all(|&i| scores[(i, c)] == scores[(rows[0], c)])).collect();
            let var: Vec<f64> = (0..m).map(|c| if constant[c] { 0.0 } else { cov(c, c) }).collect();
            let sd = var.iter().map(|v| v.sqrt()).collect();
            let mut corr = Vec::new();
            for a in 0..m {
                for b in a + 1..m {
                    let r = (!constant[a] && !constant[b]).then(|| cov(a, b) / (var[a] * var[b]).sqrt());
                    corr.push((a, b, r));
                }
            }
            BinStats { z_lo: sorted_z[lo], z_hi: sorted_z[hi - 1], count: rows.len(), mean, sd, corr }
        })
        .collect();
    let normal = Normal::standard();
    let ks_gap = (0..m)
        .map(|c| {
            let mut v: Vec<f64> = scores.column(c).iter().copied().collect();
            v.sort_by(f64::total_cmp);
            let n = v.len() as f64;
            v.iter()
                .enumerate()
                .map(|(i, &s)| {
                    let f = normal.cdf(s);
                    (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
                })
                .fold(0.0, f64::max)
        })
        .collect();
    Ok(ScoreDiagnostics { bins: stats, ks_gap })
}
