//! Run configuration: a flat TOML document plus an optional `[simulate]` table.
//!
//! Validation collects every problem it finds, each tagged with the key path
//! that caused it (`grid[3]`, `simulate.runs`). Command-line flags are merged
//! into the document before validation so they are checked the same way.

use std::fmt;
use std::path::{Path, PathBuf};

use condcov::bandwidth::{CovTarget, DEFAULT_GRID};
use condcov::diagnostics::{Regime, DEFAULT_QUANTILE};
use condcov::kernel_mean::DEFAULT_BREAKPOINT;
use condcov::simgen::Scenario;
use log::warn;
use serde::de::{DeserializeOwned, IntoDeserializer};
use serde::Serialize;
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.key, self.message)
    }
}

#[derive(Debug)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "invalid configuration")?;
        for e in &self.0 {
            write!(f, "\n  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Kfold,
    Holdout,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanKind {
    Kernel,
    Bilinear,
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuneWhat {
    Mean,
    Cov,
    Both,
    None,
}

impl TuneWhat {
    pub fn mean(self) -> bool {
        matches!(self, Self::Mean | Self::Both)
    }

    pub fn cov(self) -> bool {
        matches!(self, Self::Cov | Self::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsdKind {
    ClipEigen,
    Jitter,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extrapolation {
    Clamp,
    Error,
}

/// Fully defaulted configuration. Serializing it gives the normalized form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    pub timestamp_col: String,
    pub confounder_col: String,
    /// Empty means every column other than timestamp and confounder.
    pub output_cols: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resample_period: Option<f64>,
    /// Leading span (days) used as Phase I; everything when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phase1_days: Option<f64>,
    pub split: SplitKind,
    pub split_fraction: f64,
    pub folds: usize,
    pub strata: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_len: Option<usize>,
    pub mean_kind: MeanKind,
    pub breakpoint: f64,
    pub tune: TuneWhat,
    pub grid: Vec<f64>,
    pub cov_target: CovTarget,
    /// Used for any stage that is not tuned.
    pub bandwidth: f64,
    pub psd_policy: PsdKind,
    pub jitter_floor: f64,
    pub extrapolation: Extrapolation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_grid: Option<String>,
    pub regime: Vec<Regime>,
    pub quantile: f64,
    pub z_split: f64,
    pub pca_z: Vec<f64>,
    /// 1-based component indices removed in reconstruction.
    pub drop_components: Vec<usize>,
    pub score_bins: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub runs: usize,
    pub h_grid: Vec<f64>,
    pub eval_grid: String,
    pub tune: bool,
    pub tune_target: CovTarget,
    pub thin_rows: bool,
}

pub const DEFAULT_OUT_DIR: &str = "condcov-out";
pub const DEFAULT_SIM_EVAL_GRID: &str = "-5:20:0.5";
pub const DEFAULT_SIM_H_GRID: [f64; 4] = [0.5, 1.0, 2.5, f64::INFINITY];

const TOP_KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "input",
    "timestamp_col",
    "confounder_col",
    "output_cols",
    "resample_period",
    "phase1_days",
    "split",
    "split_fraction",
    "folds",
    "strata",
    "block_len",
    "mean_kind",
    "breakpoint",
    "tune",
    "grid",
    "cov_target",
    "bandwidth",
    "psd_policy",
    "jitter_floor",
    "extrapolation",
    "eval_grid",
    "regime",
    "quantile",
    "z_split",
    "pca_z",
    "drop_components",
    "score_bins",
    "simulate",
];

const SIM_KEYS: &[&str] = &["scenario", "n", "runs", "h_grid", "eval_grid", "tune", "tune_target", "thin_rows"];

/// Typed lookups into one table that record failures instead of returning them.
struct Reader<'a> {
    table: &'a Table,
    prefix: &'static str,
    errors: &'a mut Vec<ConfigError>,
}

impl Reader<'_> {
    fn path(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    fn fail(&mut self, key: impl Into<String>, message: impl Into<String>) {
        self.errors.push(ConfigError { key: key.into(), message: message.into() });
    }

    fn get(&self, key: &str) -> Option<&Value> {
        self.table.get(key)
    }

    fn float_of(&mut self, key: String, v: &Value) -> Option<f64> {
        match v {
            Value::Float(f) => Some(*f),
            Value::Integer(i) => Some(*i as f64),
            Value::String(s) => match s.trim().parse::<f64>() {
                Ok(f) => Some(f),
                Err(_) => {
                    self.fail(key, format!("expected a number, got \"{s}\""));
                    None
                }
            },
            other => {
                self.fail(key, format!("expected a number, got {}", other.type_str()));
                None
            }
        }
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        let v = self.get(key)?.clone();
        self.float_of(self.path(key), &v)
    }

    fn int_of(&mut self, key: String, v: &Value) -> Option<u64> {
        match v {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            Value::Integer(i) => {
                self.fail(key, format!("must be non-negative, got {i}"));
                None
            }
            other => {
                self.fail(key, format!("expected an integer, got {}", other.type_str()));
                None
            }
        }
    }

    fn int(&mut self, key: &str) -> Option<u64> {
        let v = self.get(key)?.clone();
        self.int_of(self.path(key), &v)
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.get(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                let msg = format!("expected a string, got {}", other.type_str());
                self.fail(self.path(key), msg);
                None
            }
        }
    }

    fn boolean(&mut self, key: &str) -> Option<bool> {
        match self.get(key)? {
            Value::Boolean(b) => Some(*b),
            other => {
                let msg = format!("expected a boolean, got {}", other.type_str());
                self.fail(self.path(key), msg);
                None
            }
        }
    }

    /// Accepts an array or a single scalar.
    fn list(&mut self, key: &str) -> Option<Vec<Value>> {
        match self.get(key)? {
            Value::Array(a) => Some(a.clone()),
            other => Some(vec![other.clone()]),
        }
    }

    fn floats(&mut self, key: &str) -> Option<Vec<f64>> {
        let items = self.list(key)?;
        let path = self.path(key);
        let vals: Vec<Option<f64>> = items.iter().enumerate().map(|(i, v)| self.float_of(format!("{path}[{i}]"), v)).collect();
        vals.into_iter().collect()
    }

    fn ints(&mut self, key: &str) -> Option<Vec<u64>> {
        let items = self.list(key)?;
        let path = self.path(key);
        let vals: Vec<Option<u64>> = items.iter().enumerate().map(|(i, v)| self.int_of(format!("{path}[{i}]"), v)).collect();
        vals.into_iter().collect()
    }

    fn strings(&mut self, key: &str) -> Option<Vec<String>> {
        let items = self.list(key)?;
        let path = self.path(key);
        let mut out = Vec::new();
        for (i, v) in items.iter().enumerate() {
            match v {
                Value::String(s) => out.push(s.clone()),
                other => self.fail(format!("{path}[{i}]"), format!("expected a string, got {}", other.type_str())),
            }
        }
        (out.len() == items.len()).then_some(out)
    }

    fn choice_of<T: DeserializeOwned>(&mut self, key: String, s: &str, allowed: &str) -> Option<T> {
        let de: serde::de::value::StrDeserializer<'_, serde::de::value::Error> = s.into_deserializer();
        match T::deserialize(de) {
            Ok(v) => Some(v),
            Err(_) => {
                self.fail(key, format!("unknown value \"{s}\" (expected one of {allowed})"));
                None
            }
        }
    }

    fn choice<T: DeserializeOwned>(&mut self, key: &str, allowed: &str) -> Option<T> {
        let s = self.string(key)?;
        self.choice_of(self.path(key), &s, allowed)
    }

    fn check_unknown(&mut self, known: &[&str], lenient: bool) {
        let unknown: Vec<String> = self.table.keys().filter(|k| !known.contains(&k.as_str())).cloned().collect();
        for k in unknown {
            let path = self.path(&k);
            if lenient {
                warn!("ignoring unknown configuration key {path}");
            } else {
                self.fail(path, "unknown key");
            }
        }
    }
}

fn check_bandwidth(errors: &mut Vec<ConfigError>, key: String, h: f64) {
    if !(h > 0.0) || h.is_nan() {
        errors.push(ConfigError { key, message: format!("bandwidth must be positive, got {h}") });
    }
}

/// Absolute form of `path` taken relative to `base`, so the normalized
/// document does not depend on where it is stored.
fn resolve(base: &Path, path: &str) -> PathBuf {
    let joined = base.join(path);
    std::path::absolute(&joined).unwrap_or(joined)
}

/// Parses `zmin:zmax:step` into the points `zmin + i·step ≤ zmax`.
pub fn parse_range(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, step] = parts.as_slice() else {
        return Err(format!("expected zmin:zmax:step, got \"{s}\""));
    };
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("\"{t}\" is not a number"));
    let (lo, hi, step) = (num(lo)?, num(hi)?, num(step)?);
    if !(lo.is_finite() && hi.is_finite() && step.is_finite()) {
        return Err("range bounds and step must be finite".into());
    }
    if !(step > 0.0) || hi < lo {
        return Err(format!("need zmin <= zmax and step > 0, got \"{s}\""));
    }
    let count = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|i| lo + i as f64 * step).collect())
}

impl RunConfig {
    /// Validates a document and fills defaults. Relative paths are resolved
    /// against `base`.
    pub fn from_table(table: &Table, base: &Path, lenient: bool) -> Result<Self, ConfigErrors> {
        let mut errors = Vec::new();
        let mut r = Reader { table, prefix: "", errors: &mut errors };
        r.check_unknown(TOP_KEYS, lenient);

        let seed = r.int("seed").unwrap_or(0);
        let out_dir = resolve(base, &r.string("out_dir").unwrap_or_else(|| DEFAULT_OUT_DIR.into()));
        let input = r.string("input").map(|s| resolve(base, &s));
        if let Some(p) = &input {
            if !p.is_file() {
                r.fail("input", format!("file not found: {}", p.display()));
            }
        }
        let timestamp_col = r.string("timestamp_col").unwrap_or_else(|| "timestamp".into());
        let confounder_col = r.string("confounder_col").unwrap_or_else(|| "z".into());
        let output_cols = r.strings("output_cols").unwrap_or_default();
        let resample_period = r.float("resample_period");
        if let Some(v) = resample_period {
            if !(v > 0.0 && v.is_finite()) {
                r.fail("resample_period", format!("must be a positive number of seconds, got {v}"));
            }
        }
        let phase1_days = r.float("phase1_days");
        if let Some(v) = phase1_days {
            if !(v > 0.0) {
                r.fail("phase1_days", format!("must be positive, got {v}"));
            }
        }
        let split = r.choice("split", "kfold, holdout").unwrap_or(SplitKind::Kfold);
        let split_fraction = r.float("split_fraction").unwrap_or(0.3);
        if !(split_fraction > 0.0 && split_fraction < 1.0) {
            r.fail("split_fraction", format!("must lie in (0, 1), got {split_fraction}"));
        }
        let folds = r.int("folds").unwrap_or(5) as usize;
        if folds < 2 {
            r.fail("folds", format!("need at least 2 folds, got {folds}"));
        }
        let strata = r.int("strata").unwrap_or(condcov::dataset::DEFAULT_STRATA as u64) as usize;
        if strata == 0 {
            r.fail("strata", "need at least 1 stratum");
        }
        let block_len = r.int("block_len").map(|v| v as usize);
        if block_len == Some(0) {
            r.fail("block_len", "block length must be at least 1");
        }
        let mean_kind = r.choice("mean_kind", "kernel, bilinear, constant").unwrap_or(MeanKind::Kernel);
        let breakpoint = r.float("breakpoint").unwrap_or(DEFAULT_BREAKPOINT);
        if !breakpoint.is_finite() {
            r.fail("breakpoint", "must be finite");
        }
        let tune = r.choice("tune", "mean, cov, both, none").unwrap_or(TuneWhat::Both);
        let grid = r.floats("grid").unwrap_or_else(|| DEFAULT_GRID.to_vec());
        if grid.is_empty() {
            r.fail("grid", "bandwidth grid is empty");
        }
        for (i, &h) in grid.iter().enumerate() {
            check_bandwidth(r.errors, format!("grid[{i}]"), h);
        }
        let cov_target = r.choice("cov_target", "per_pair, global, correlation_per_pair").unwrap_or(CovTarget::PerPair);
        let bandwidth = r.float("bandwidth").unwrap_or(1.0);
        check_bandwidth(r.errors, "bandwidth".into(), bandwidth);
        let psd_policy = r.choice("psd_policy", "clip_eigen, jitter, off").unwrap_or(PsdKind::ClipEigen);
        let jitter_floor = r.float("jitter_floor").unwrap_or(1e-8);
        if !(jitter_floor > 0.0 && jitter_floor.is_finite()) {
            r.fail("jitter_floor", format!("must be positive, got {jitter_floor}"));
        }
        let extrapolation = r.choice("extrapolation", "clamp, error").unwrap_or(Extrapolation::Clamp);
        let eval_grid = r.string("eval_grid");
        if let Some(Err(e)) = eval_grid.as_deref().map(parse_range) {
            r.fail("eval_grid", e);
        }
        let regime = match r.strings("regime") {
            Some(names) => {
                let mut out: Vec<Regime> = Vec::new();
                for (i, s) in names.iter().enumerate() {
                    match s.parse::<Regime>() {
                        Ok(g) if !out.contains(&g) => out.push(g),
                        Ok(_) => {}
                        Err(_) => r.fail(format!("regime[{i}]"), format!("unknown regime \"{s}\" (expected none, mean, full)")),
                    }
                }
                out.sort_by_key(|g| Regime::ALL.iter().position(|a| a == g));
                out
            }
            None => Regime::ALL.to_vec(),
        };
        let quantile = r.float("quantile").unwrap_or(DEFAULT_QUANTILE);
        if !(quantile > 0.0 && quantile < 1.0) {
            r.fail("quantile", format!("must lie in (0, 1), got {quantile}"));
        }
        let z_split = r.float("z_split").unwrap_or(DEFAULT_BREAKPOINT);
        let pca_z = r.floats("pca_z").unwrap_or_default();
        for (i, z) in pca_z.iter().enumerate() {
            if !z.is_finite() {
                r.fail(format!("pca_z[{i}]"), "must be finite");
            }
        }
        let drop_components: Vec<usize> = r.ints("drop_components").unwrap_or_default().into_iter().map(|v| v as usize).collect();
        for (i, &c) in drop_components.iter().enumerate() {
            if c == 0 {
                r.fail(format!("drop_components[{i}]"), "component indices start at 1");
            }
        }
        let score_bins = r.int("score_bins").unwrap_or(condcov::cpca::DEFAULT_SCORE_BINS as u64) as usize;
        if score_bins < 2 {
            r.fail("score_bins", format!("need at least 2 bins, got {score_bins}"));
        }

        let simulate = match table.get("simulate") {
            None => None,
            Some(Value::Table(t)) => parse_sim(t, lenient, &mut errors),
            Some(other) => {
                errors.push(ConfigError { key: "simulate".into(), message: format!("expected a table, got {}", other.type_str()) });
                None
            }
        };

        if errors.is_empty() {
            Ok(Self {
                seed,
                out_dir,
                input,
                timestamp_col,
                confounder_col,
                output_cols,
                resample_period,
                phase1_days,
                split,
                split_fraction,
                folds,
                strata,
                block_len,
                mean_kind,
                breakpoint,
                tune,
                grid,
                cov_target,
                bandwidth,
                psd_policy,
                jitter_floor,
                extrapolation,
                eval_grid,
                regime,
                quantile,
                z_split,
                pca_z,
                drop_components,
                score_bins,
                simulate,
            })
        } else {
            Err(ConfigErrors(errors))
        }
    }

    /// Normalized TOML; validating it again yields the same configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }
}

fn parse_sim(t: &Table, lenient: bool, errors: &mut Vec<ConfigError>) -> Option<SimConfig> {
    let mut r = Reader { table: t, prefix: "simulate.", errors };
    r.check_unknown(SIM_KEYS, lenient);
    let scenario = match r.string("scenario") {
        Some(s) => r.choice_of(r.path("scenario"), &s, "constant, linear, logistic, mixed"),
        None => {
            r.fail("simulate.scenario", "missing required key");
            None
        }
    };
    let n = r.int("n").unwrap_or(100) as usize;
    if n == 0 {
        r.fail("simulate.n", "need at least 1 sample per grid point");
    }
    let runs = r.int("runs").unwrap_or(50) as usize;
    if runs == 0 {
        r.fail("simulate.runs", "need at least 1 run");
    }
    let h_grid = r.floats("h_grid").unwrap_or_else(|| DEFAULT_SIM_H_GRID.to_vec());
    for (i, &h) in h_grid.iter().enumerate() {
        check_bandwidth(r.errors, format!("simulate.h_grid[{i}]"), h);
    }
    let eval_grid = r.string("eval_grid").unwrap_or_else(|| DEFAULT_SIM_EVAL_GRID.into());
    if let Err(e) = parse_range(&eval_grid) {
        r.fail("simulate.eval_grid", e);
    }
    let tune = r.boolean("tune").unwrap_or(true);
    let tune_target = r.choice("tune_target", "per_pair, global, correlation_per_pair").unwrap_or(CovTarget::CorrelationPerPair);
    let thin_rows = r.boolean("thin_rows").unwrap_or(false);
    Some(SimConfig { scenario: scenario?, n, runs, h_grid, eval_grid, tune, tune_target, thin_rows })
}

/// Reads a TOML document from disk.
pub fn read_table(path: &Path) -> Result<Table, ConfigErrors> {
    let fail = |message: String| ConfigErrors(vec![ConfigError { key: "<file>".into(), message }]);
    let text = std::fs::read_to_string(path).map_err(|e| fail(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<Table>().map_err(|e| fail(format!("{}: {e}", path.display())))
}
