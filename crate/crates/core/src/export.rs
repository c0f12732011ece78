//! Plot-ready CSV writers for fitted models and pipeline results.
//!
//! Numbers use [`fmt_f64`]: shortest round-trip decimal, `inf` for the
//! marginal-bandwidth sentinel, `NaN` for estimates that do not exist.

use std::io::Write;

use log::warn;

use crate::bandwidth::LossCurve;
use crate::condcov::{cov_to_corr, CondCovModel};
use crate::cpca::{CondEigen, ScoreMatrix};
use crate::dataset::fmt_f64;
use crate::diagnostics::{DiagnosticSeries, Phase};
use crate::error::{Error, Result};
use crate::simgen::{Ensemble, PointSummary};

/// `z,j,k,sigma_jk,rho_jk` for `j ≤ k` (1-based channels) from the raw
/// per-entry estimates. Grid points in a sparse region are written as `NaN`.
pub fn write_cov_grid<W: Write>(out: W, cov: &CondCovModel, zs: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["z", "j", "k", "sigma_jk", "rho_jk"])?;
    let p = cov.p();
    for &z in zs {
        let (sigma, rho) = match cov.eval_cov_raw(z) {
            Ok(s) => {
                let r = match cov_to_corr(&s, z) {
                    Ok(r) => Some(r),
                    Err(Error::DegenerateChannel { .. }) => None,
                    Err(e) => return Err(e),
                };
                (Some(s), r)
            }
            Err(Error::SparseRegion { .. }) => {
                warn!("no kernel mass at z = {z}; writing NaN");
                (None, None)
            }
            Err(e) => return Err(e),
        };
        for j in 0..p {
            for k in j..p {
                let s = sigma.as_ref().map_or(f64::NAN, |m| m[(j, k)]);
                let r = rho.as_ref().map_or(f64::NAN, |m| m[(j, k)]);
                w.write_record([fmt_f64(z), (j + 1).to_string(), (k + 1).to_string(), fmt_f64(s), fmt_f64(r)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn loss_rows<'a>(curves: impl IntoIterator<Item = &'a LossCurve>) -> Vec<[String; 3]> {
    curves
        .into_iter()
        .flat_map(|c| c.candidates.iter().zip(&c.losses).map(move |(&h, &l)| [fmt_f64(h), fmt_f64(l), c.target.clone()]))
        .collect()
}

/// `h,loss,target`.
pub fn write_loss_curves<'a, W: Write>(out: W, curves: impl IntoIterator<Item = &'a LossCurve>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["h", "loss", "target"])?;
    for row in loss_rows(curves) {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-run loss curves of a Monte Carlo ensemble: `run,h,loss,target`.
pub fn write_ensemble_losses<W: Write>(out: W, ensemble: &Ensemble) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "h", "loss", "target"])?;
    for r in &ensemble.runs {
        for [h, l, t] in loss_rows(&r.loss_curves) {
            w.write_record([r.run.to_string(), h, l, t])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Tuned bandwidth per run and entry: `run,j,k,h`.
pub fn write_selected<W: Write>(out: W, ensemble: &Ensemble) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "j", "k", "h"])?;
    for r in &ensemble.runs {
        let Some(h) = &r.selected else { continue };
        for j in 0..h.p() {
            for k in j..h.p() {
                w.write_record([r.run.to_string(), (j + 1).to_string(), (k + 1).to_string(), fmt_f64(h.get(j, k))])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `timestamp,z,d2,alarm,phase` with `alarm` as 0/1 and phase `I`/`II`.
pub fn write_diagnostics<W: Write>(out: W, series: &DiagnosticSeries) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["timestamp", "z", "d2", "alarm", "phase"])?;
    for p in &series.points {
        let phase = match p.phase {
            Phase::I => "I",
            Phase::II => "II",
        };
        w.write_record([fmt_f64(p.timestamp), fmt_f64(p.z), fmt_f64(p.d2), u8::from(p.alarm).to_string(), phase.into()])?;
    }
    w.flush()?;
    Ok(())
}

/// `timestamp,z,s1..sm` where `sc` is the score of component `c` (1-based).
pub fn write_scores<W: Write>(out: W, timestamps: &[f64], scores: &ScoreMatrix) -> Result<()> {
    if timestamps.len() != scores.z.len() {
        return Err(Error::Shape { what: "score timestamps", expected: scores.z.len(), actual: timestamps.len() });
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["timestamp".to_string(), "z".to_string()];
    header.extend(scores.components.iter().map(|c| format!("s{}", c + 1)));
    w.write_record(&header)?;
    for (i, (&t, &z)) in timestamps.iter().zip(&scores.z).enumerate() {
        let mut row = vec![fmt_f64(t), fmt_f64(z)];
        row.extend(scores.scores.row(i).iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `z,component,eigenvalue,v1..vp`, one row per component and grid point.
pub fn write_components<W: Write>(out: W, decomps: &[CondEigen]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let p = decomps.first().map_or(0, |e| e.eigenvalues.len());
    let mut header = vec!["z".to_string(), "component".to_string(), "eigenvalue".to_string()];
    header.extend((1..=p).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for e in decomps {
        for c in 0..p {
            let mut row = vec![fmt_f64(e.z), (c + 1).to_string(), fmt_f64(e.eigenvalues[c])];
            row.extend(e.vectors.column(c).iter().map(|&v| fmt_f64(v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `run,z,target,estimate`.
pub fn write_ensemble<W: Write>(out: W, ensemble: &Ensemble) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "z", "target", "estimate"])?;
    for r in ensemble.records() {
        w.write_record([r.run.to_string(), fmt_f64(r.z), r.target.clone(), fmt_f64(r.estimate)])?;
    }
    w.flush()?;
    Ok(())
}

/// `target,z,mean,sd,count`.
pub fn write_summary<W: Write>(out: W, summary: &[PointSummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target", "z", "mean", "sd", "count"])?;
    for s in summary {
        w.write_record([s.target.clone(), fmt_f64(s.z), fmt_f64(s.mean), fmt_f64(s.sd), s.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condcov::{fit_condcov, BandwidthMatrix};
    use crate::diagnostics::DiagnosticPoint;
    use crate::diagnostics::Regime;
    use crate::kernel_mean::MeanModel;
    use nalgebra::DMatrix;

    fn text(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn cov_grid_lists_upper_triangle() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0]);
        let z = vec![0.0, 0.0, 1.0, 1.0];
        let cov = fit_condcov(&x, &z, &MeanModel::fixed(vec![0.0, 0.0]), &BandwidthMatrix::marginal(2)).unwrap();
        let s = text(|b| write_cov_grid(b, &cov, &[0.5]));
        assert_eq!(s, "z,j,k,sigma_jk,rho_jk\n0.5,1,1,1,1\n0.5,1,2,0,0\n0.5,2,2,1,1\n");
    }

    #[test]
    fn loss_curve_rows() {
        let c = LossCurve::new("m1", &[1.0, f64::INFINITY], &[2.0, 1.5]).unwrap();
        assert_eq!(text(|b| write_loss_curves(b, [&c])), "h,loss,target\n1,2,m1\ninf,1.5,m1\n");
    }

    #[test]
    fn diagnostics_rows() {
        let series = DiagnosticSeries {
            regime: Regime::Full,
            threshold: 9.21,
            dof: 2,
            points: vec![
                DiagnosticPoint { timestamp: 0.0, z: -1.5, d2: 12.0, alarm: true, phase: Phase::I },
                DiagnosticPoint { timestamp: 600.0, z: 3.0, d2: 0.25, alarm: false, phase: Phase::II },
            ],
        };
        assert_eq!(text(|b| write_diagnostics(b, &series)), "timestamp,z,d2,alarm,phase\n0,-1.5,12,1,I\n600,3,0.25,0,II\n");
    }

    #[test]
    fn score_header_follows_components() {
        let s = ScoreMatrix { scores: DMatrix::from_row_slice(1, 2, &[0.5, -2.0]), z: vec![1.0], components: vec![0, 2] };
        assert_eq!(text(|b| write_scores(b, &[10.0], &s)), "timestamp,z,s1,s3\n10,1,0.5,-2\n");
        assert!(write_scores(Vec::new(), &[], &s).is_err());
    }
}
