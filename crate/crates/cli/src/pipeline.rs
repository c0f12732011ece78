//! Pipeline stages. Each stage reads its inputs from the output directory, so
//! it can run standalone on the artifacts of an earlier invocation.

use std::fs;

use anyhow::{bail, Context, Result};
use condcov::bandwidth::{tune, MeanStage, TuneConfig};
use condcov::condcov::{BandwidthMatrix, PsdPolicy};
use condcov::cpca::{cond_eigen, cond_scores, reconstruct, score_diagnostics};
use condcov::dataset::{
    estimate_period, fill_missing, load_csv, read_header, resample, split, AlignedDataset, DatasetMeta, Schema, SplitPlan, Strata,
};
use condcov::diagnostics::{
    alarm_report, chi2_threshold, monitor, phase1_loo, AlarmReport, DiagnosticPoint, DiagnosticSeries, Phase, Regime,
};
use condcov::export;
use condcov::kernel_mean::{ExtrapolationPolicy, MeanSpec};
use condcov::simgen::{monte_carlo, sample, McConfig, ScenarioSpec, ThinMode, TuneSetup};
use log::info;
use serde::Serialize;

use crate::artifacts::{model_file, sha256_hex, Artifacts, ModelDoc, TuningDoc, ALIGNED, TUNING};
use crate::config::{parse_range, Extrapolation, MeanKind, PsdKind, RunConfig, SimConfig, SplitKind};

pub const PHASE1: &str = "phase1.csv";
pub const PHASE2: &str = "phase2.csv";
pub const LOSS_CURVES: &str = "loss_curves.csv";
pub const COV_GRID: &str = "cov_grid.csv";
pub const SCORES: &str = "scores.csv";
pub const COMPONENTS: &str = "components.csv";
pub const SCORE_DIAGNOSTICS: &str = "score_diagnostics.json";
pub const RECONSTRUCTED: &str = "reconstructed.csv";
pub const REPORT: &str = "report.json";
pub const SIM_DATA: &str = "simulated.csv";
pub const ENSEMBLE: &str = "ensemble.csv";
pub const ENSEMBLE_SUMMARY: &str = "ensemble_summary.csv";
pub const ENSEMBLE_LOSSES: &str = "ensemble_losses.csv";
pub const ENSEMBLE_SELECTED: &str = "ensemble_selected.csv";
pub const TRUTH_GRID: &str = "truth_grid.csv";

const EVAL_POINTS: usize = 101;
const SECONDS_PER_DAY: f64 = 86_400.0;

pub fn diagnostics_file(regime: Regime) -> String {
    format!("diagnostics_{}.csv", regime.name())
}

fn psd_policy(cfg: &RunConfig) -> PsdPolicy {
    match cfg.psd_policy {
        PsdKind::ClipEigen => PsdPolicy::ClipEigen,
        PsdKind::Jitter => PsdPolicy::Jitter { floor: cfg.jitter_floor },
        PsdKind::Off => PsdPolicy::Off,
    }
}

fn extrapolation(cfg: &RunConfig) -> ExtrapolationPolicy {
    match cfg.extrapolation {
        Extrapolation::Clamp => ExtrapolationPolicy::Clamp,
        Extrapolation::Error => ExtrapolationPolicy::Error,
    }
}

fn sim_spec(sim: &SimConfig) -> ScenarioSpec {
    let thin_mode = if sim.thin_rows { ThinMode::Row } else { ThinMode::GridPoint };
    ScenarioSpec { thin_mode, ..ScenarioSpec::preset(sim.scenario, sim.n) }
}

fn load(arts: &Artifacts, name: &str) -> Result<AlignedDataset> {
    let path = arts.path(name);
    AlignedDataset::load(&path).with_context(|| format!("cannot load {} (run the earlier stages first)", path.display()))
}

/// Phase I rows train every model; Phase II rows are only monitored.
fn phase1(arts: &Artifacts) -> Result<AlignedDataset> {
    load(arts, PHASE1)
}

fn phase2(arts: &Artifacts) -> Result<Option<AlignedDataset>> {
    if arts.path(PHASE2).exists() {
        load(arts, PHASE2).map(Some)
    } else {
        Ok(None)
    }
}

fn write_dataset(arts: &mut Artifacts, name: &str, data: &AlignedDataset) -> Result<()> {
    arts.write(name, |w| Ok(data.write_csv(w)?))
}

/// Reads and aligns the input file, or draws one synthetic data set when
/// only a simulation is configured. Writes the aligned data and its phases.
pub fn preprocess(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    let data = if let Some(input) = &cfg.input {
        let outputs = if cfg.output_cols.is_empty() {
            read_header(input)?.into_iter().filter(|c| *c != cfg.timestamp_col && *c != cfg.confounder_col).collect()
        } else {
            cfg.output_cols.clone()
        };
        let schema = Schema { timestamp: cfg.timestamp_col.clone(), confounder: cfg.confounder_col.clone(), outputs };
        let mut records = load_csv(input, &schema).with_context(|| format!("reading {}", input.display()))?;
        if let Some(period) = cfg.resample_period {
            records = resample(&records, period)?;
        }
        let filled = fill_missing(&records)?;
        if filled.trimmed_leading + filled.trimmed_trailing > 0 {
            info!("trimmed {} leading and {} trailing incomplete records", filled.trimmed_leading, filled.trimmed_trailing);
        }
        let times: Vec<f64> = filled.records.iter().map(|r| r.timestamp).collect();
        let period = cfg.resample_period.or_else(|| estimate_period(&times)).unwrap_or(1.0);
        let meta =
            DatasetMeta { channels: schema.outputs.clone(), units: vec![String::new(); schema.outputs.len()], sample_period: period };
        AlignedDataset::from_records(&filled.records, meta)?
    } else if let Some(sim) = &cfg.simulate {
        let data = sample(&sim_spec(sim), cfg.seed, 0)?;
        write_dataset(arts, SIM_DATA, &data)?;
        data
    } else {
        bail!("nothing to preprocess: set `input` or a [simulate] table");
    };
    info!("aligned {} rows of {} channels", data.n(), data.p());
    write_dataset(arts, ALIGNED, &data)?;
    let (p1, p2) = match (cfg.phase1_days, data.timestamps().first()) {
        (Some(days), Some(&t0)) => data.split_at_time(t0 + days * SECONDS_PER_DAY),
        _ => (data.clone(), data.subset(&[])),
    };
    if p1.n() == 0 {
        bail!("Phase I is empty");
    }
    write_dataset(arts, PHASE1, &p1)?;
    if p2.n() > 0 {
        write_dataset(arts, PHASE2, &p2)?;
    } else if arts.path(PHASE2).exists() {
        fs::remove_file(arts.path(PHASE2))?;
    }
    arts.stage_done("preprocess");
    Ok(())
}

/// Day-long blocks, shortened so every fold gets about ten blocks.
fn block_len(cfg: &RunConfig, data: &AlignedDataset) -> usize {
    cfg.block_len.unwrap_or_else(|| {
        let day = SplitPlan::day_block_len(data.meta().sample_period);
        day.min((data.n() / (10 * cfg.folds)).max(1))
    })
}

fn configured_mean(cfg: &RunConfig, p: usize) -> MeanSpec {
    match cfg.mean_kind {
        MeanKind::Kernel => MeanSpec::Kernel { bandwidths: vec![cfg.bandwidth; p] },
        MeanKind::Bilinear => MeanSpec::Bilinear { breakpoint: cfg.breakpoint },
        MeanKind::Constant => MeanSpec::Constant,
    }
}

pub fn tune_stage(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    let data = phase1(arts)?;
    let p = data.p();
    let plan = match cfg.split {
        SplitKind::Kfold => SplitPlan::kfold(cfg.folds, block_len(cfg, &data)),
        SplitKind::Holdout => SplitPlan::holdout(cfg.split_fraction, block_len(cfg, &data)),
    }
    .with_strata(Strata::EqualWidth(cfg.strata));
    let folds = split(&data, &plan, cfg.seed)?;
    let mean = if cfg.tune.mean() && cfg.mean_kind == MeanKind::Kernel { MeanStage::Tune } else { MeanStage::Use(configured_mean(cfg, p)) };
    let config = TuneConfig { grid: cfg.grid.clone(), mean, cov: cfg.tune.cov().then_some(cfg.cov_target), policy: extrapolation(cfg) };
    let result = tune(&data, &folds, &config)?;
    let h = match &result.bandwidths {
        Some(h) => h.clone(),
        None => BandwidthMatrix::global(p, cfg.bandwidth)?,
    };
    for c in result.curves() {
        info!("{}: selected h = {}", c.target, c.selected());
    }
    arts.write(LOSS_CURVES, |w| Ok(export::write_loss_curves(w, result.curves())?))?;
    arts.write_json(TUNING, &TuningDoc::new(&result.mean_spec, &h))?;
    arts.stage_done("tune");
    Ok(())
}

/// Mean spec and covariance bandwidths: tuned when tuning is configured,
/// otherwise taken from the configuration.
fn bandwidths(cfg: &RunConfig, arts: &Artifacts, p: usize) -> Result<(MeanSpec, BandwidthMatrix)> {
    if cfg.tune == crate::config::TuneWhat::None {
        return Ok((configured_mean(cfg, p), BandwidthMatrix::global(p, cfg.bandwidth)?));
    }
    let path = arts.path(TUNING);
    let text = fs::read(&path).with_context(|| format!("cannot read {} (run `tune` first)", path.display()))?;
    let doc: TuningDoc = serde_json::from_slice(&text).with_context(|| format!("malformed {}", path.display()))?;
    Ok((doc.mean.spec(), doc.bandwidths()?))
}

/// Regimes to fit: the configured ones plus `full`, which PCA needs.
fn fitted_regimes(cfg: &RunConfig) -> Vec<Regime> {
    let mut r = cfg.regime.clone();
    if !r.contains(&Regime::Full) {
        r.push(Regime::Full);
    }
    r
}

fn eval_grid(cfg: &RunConfig, data: &AlignedDataset) -> Result<Vec<f64>> {
    if let Some(g) = &cfg.eval_grid {
        return parse_range(g).map_err(anyhow::Error::msg);
    }
    let (lo, hi) = data.z_range().context("empty training data")?;
    if hi == lo {
        return Ok(vec![lo]);
    }
    Ok((0..EVAL_POINTS).map(|i| lo + (hi - lo) * i as f64 / (EVAL_POINTS - 1) as f64).collect())
}

pub fn fit_stage(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    let data = phase1(arts)?;
    let (mean_spec, h) = bandwidths(cfg, arts, data.p())?;
    let training_sha = sha256_hex(&fs::read(arts.path(PHASE1))?);
    for regime in fitted_regimes(cfg) {
        let models = condcov::diagnostics::fit_regime(&data, regime, &mean_spec, &h, psd_policy(cfg))?.with_policy(extrapolation(cfg));
        arts.write_json(&model_file(regime), &ModelDoc::new(&models, PHASE1, training_sha.clone()))?;
        if regime == Regime::Full {
            let zs = eval_grid(cfg, &data)?;
            arts.write(COV_GRID, |w| Ok(export::write_cov_grid(w, &models.cov, &zs)?))?;
        }
    }
    arts.stage_done("fit");
    Ok(())
}

pub fn monitor_stage(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    let p1 = phase1(arts)?;
    let p2 = phase2(arts)?;
    for &regime in &cfg.regime {
        let models = ModelDoc::load(arts.dir(), regime)?;
        let mut series = phase1_loo(&p1, &models, cfg.quantile)?;
        if let Some(p2) = &p2 {
            series.extend(monitor(p2, &models, series.threshold)?);
        }
        let alarms = series.points.iter().filter(|p| p.alarm).count();
        info!("{}: {alarms} alarms in {} points (threshold {:.4})", regime.name(), series.len(), series.threshold);
        arts.write(&diagnostics_file(regime), |w| Ok(export::write_diagnostics(w, &series)?))?;
    }
    arts.stage_done("monitor");
    Ok(())
}

fn read_series(arts: &Artifacts, regime: Regime, threshold: f64, dof: usize) -> Result<DiagnosticSeries> {
    let path = arts.path(&diagnostics_file(regime));
    let mut rdr = csv::Reader::from_path(&path).with_context(|| format!("cannot read {} (run `monitor` first)", path.display()))?;
    let mut points = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = || anyhow::anyhow!("{} line {}: malformed row", path.display(), i + 2);
        let num = |c: usize| row.get(c).and_then(|v| v.parse::<f64>().ok()).ok_or_else(bad);
        let phase = match row.get(4) {
            Some("I") => Phase::I,
            Some("II") => Phase::II,
            _ => return Err(bad()),
        };
        points.push(DiagnosticPoint { timestamp: num(0)?, z: num(1)?, d2: num(2)?, alarm: num(3)? != 0.0, phase });
    }
    Ok(DiagnosticSeries { regime, threshold, dof, points })
}

#[derive(Serialize)]
struct PhaseReport {
    phase: &'static str,
    #[serde(flatten)]
    report: AlarmReport,
}

pub fn report_stage(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    let dof = phase1(arts)?.p();
    let threshold = chi2_threshold(dof, cfg.quantile)?;
    let mut out = Vec::new();
    for &regime in &cfg.regime {
        let series = read_series(arts, regime, threshold, dof)?;
        for (phase, name) in [(Phase::I, "I"), (Phase::II, "II")] {
            let part = DiagnosticSeries { points: series.points.iter().filter(|p| p.phase == phase).copied().collect(), ..series.clone() };
            if part.is_empty() {
                continue;
            }
            let report = alarm_report(&part, cfg.z_split);
            info!(
                "{} phase {name}: alarm rate {:.4} overall, {:?} below z = {}",
                regime.name(),
                report.rate_overall.unwrap_or(f64::NAN),
                report.rate_below_split,
                cfg.z_split
            );
            out.push(PhaseReport { phase: name, report });
        }
    }
    arts.write_json(REPORT, &out)?;
    arts.stage_done("report");
    Ok(())
}

pub fn pca_stage(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    let p1 = phase1(arts)?;
    let all = load(arts, ALIGNED)?;
    let models = ModelDoc::load(arts.dir(), Regime::Full)?;
    let p = all.p();
    if let Some(&c) = cfg.drop_components.iter().find(|&&c| c > p) {
        bail!("drop_components: component {c} does not exist (p = {p})");
    }
    let components: Vec<usize> = (0..p).collect();
    let scores = cond_scores(all.x(), all.z(), &models.mean, &models.cov, &components)?;
    arts.write(SCORES, |w| Ok(export::write_scores(w, all.timestamps(), &scores)?))?;

    let zs = if cfg.pca_z.is_empty() { eval_grid(cfg, &p1)? } else { cfg.pca_z.clone() };
    let decomps = zs.iter().map(|&z| cond_eigen(&models.cov, z)).collect::<condcov::Result<Vec<_>>>()?;
    arts.write(COMPONENTS, |w| Ok(export::write_components(w, &decomps)?))?;

    let p1_scores = cond_scores(p1.x(), p1.z(), &models.mean, &models.cov, &components)?;
    let diag = score_diagnostics(&p1_scores.scores, p1.z(), cfg.score_bins)?;
    let (m, sd, r) = diag.worst();
    info!("Phase I scores: max |mean| {m:.3}, max |sd - 1| {sd:.3}, max |corr| {r:.3}");
    arts.write_json(SCORE_DIAGNOSTICS, &diag)?;

    if !cfg.drop_components.is_empty() {
        let drop: Vec<usize> = cfg.drop_components.iter().map(|c| c - 1).collect();
        let x = reconstruct(&scores, &models.mean, &models.cov, &drop)?;
        let rec = AlignedDataset::new(all.timestamps().to_vec(), all.z().to_vec(), x, all.meta().clone())?;
        write_dataset(arts, RECONSTRUCTED, &rec)?;
    }
    arts.stage_done("pca");
    Ok(())
}

pub fn simulate_stage(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    let sim = cfg.simulate.as_ref().context("no [simulate] table configured")?;
    let spec = sim_spec(sim);
    let eval_z = parse_range(&sim.eval_grid).map_err(anyhow::Error::msg)?;
    let mc = McConfig {
        runs: sim.runs,
        seed: cfg.seed,
        bandwidths: sim.h_grid.clone(),
        eval_z: eval_z.clone(),
        tune: sim.tune.then(|| TuneSetup { grid: cfg.grid.clone(), folds: cfg.folds, target: sim.tune_target }),
    };
    info!("simulating {} runs of the {:?} scenario at n = {}", sim.runs, sim.scenario, sim.n);
    let ensemble = monte_carlo(&spec, &mc)?;
    arts.write(ENSEMBLE, |w| Ok(export::write_ensemble(w, &ensemble)?))?;
    arts.write(ENSEMBLE_SUMMARY, |w| Ok(export::write_summary(w, &ensemble.summarize())?))?;
    if sim.tune {
        arts.write(ENSEMBLE_LOSSES, |w| Ok(export::write_ensemble_losses(w, &ensemble)?))?;
        arts.write(ENSEMBLE_SELECTED, |w| Ok(export::write_selected(w, &ensemble)?))?;
    }
    arts.write(TRUTH_GRID, |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["z", "j", "k", "sigma_jk", "rho_jk"])?;
        for &z in &eval_z {
            let (s, r) = spec.truth(z);
            for j in 0..s.nrows() {
                for k in j..s.ncols() {
                    let f = condcov::dataset::fmt_f64;
                    c.write_record([f(z), (j + 1).to_string(), (k + 1).to_string(), f(s[(j, k)]), f(r[(j, k)])])?;
                }
            }
        }
        c.flush()?;
        Ok(())
    })?;
    arts.stage_done("simulate");
    Ok(())
}

/// Every stage the configuration asks for, in order.
pub fn run_all(cfg: &RunConfig, arts: &mut Artifacts) -> Result<()> {
    if cfg.input.is_none() && cfg.simulate.is_none() {
        bail!("nothing to run: set `input` or a [simulate] table");
    }
    type Stage = fn(&RunConfig, &mut Artifacts) -> Result<()>;
    let mut stages: Vec<(&str, Stage)> = vec![("preprocess", preprocess)];
    if cfg.tune != crate::config::TuneWhat::None {
        stages.push(("tune", tune_stage));
    }
    stages.extend([("fit", fit_stage as Stage), ("monitor", monitor_stage), ("report", report_stage), ("pca", pca_stage)]);
    if cfg.simulate.is_some() {
        stages.push(("simulate", simulate_stage));
    }
    for (name, stage) in stages {
        info!("stage {name}");
        stage(cfg, arts).with_context(|| format!("stage {name}"))?;
    }
    Ok(())
}
