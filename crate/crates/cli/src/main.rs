//! `condcov` batch command line.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod artifacts;
mod config;
mod pipeline;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand};
use log::LevelFilter;
use toml::{Table, Value};

use crate::artifacts::{sha256_hex, Artifacts};
use crate::config::{read_table, ConfigErrors, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "condcov", version, about = "Confounder-conditional covariance estimation, diagnostics and conditional PCA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
    #[command(flatten)]
    flags: Overrides,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Read, resample and align the input (or draw a synthetic data set).
    Preprocess,
    /// Select bandwidths by validation loss.
    Tune,
    /// Fit mean and covariance models for each regime.
    Fit,
    /// Conditional Mahalanobis distances: leave-one-out Phase I plus Phase II.
    Monitor,
    /// Conditional PCA scores, components and score diagnostics.
    Pca,
    /// Monte Carlo ensemble from a synthetic scenario.
    Simulate,
    /// False-alarm rates from the diagnostic series.
    Report,
    /// Every configured stage in order.
    Run,
    /// Check the configuration and print its normalized form.
    Validate,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Preprocess => "preprocess",
            Self::Tune => "tune",
            Self::Fit => "fit",
            Self::Monitor => "monitor",
            Self::Pca => "pca",
            Self::Simulate => "simulate",
            Self::Report => "report",
            Self::Run => "run",
            Self::Validate => "validate",
        }
    }

    /// Library module doing the work, for error messages.
    fn module(self) -> &'static str {
        match self {
            Self::Preprocess => "dataset",
            Self::Tune => "bandwidth",
            Self::Fit => "condcov",
            Self::Monitor | Self::Report => "diagnostics",
            Self::Pca => "cpca",
            Self::Simulate => "simgen",
            Self::Run | Self::Validate => "cli",
        }
    }
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CONDCOV_OUT_DIR")]
    out_dir: Option<PathBuf>,
    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// More logging; repeat for trace output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Warn about unknown configuration keys instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
}

/// Flags that override configuration keys of the same name.
#[derive(Args, Debug, Default)]
struct Overrides {
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    #[arg(long, global = true)]
    timestamp_col: Option<String>,
    #[arg(long, global = true)]
    confounder_col: Option<String>,
    #[arg(long, global = true, value_delimiter = ',')]
    output_cols: Option<Vec<String>>,
    /// Seconds.
    #[arg(long, global = true)]
    resample_period: Option<f64>,
    #[arg(long, global = true)]
    phase1_days: Option<f64>,
    /// kfold or holdout.
    #[arg(long, global = true)]
    split: Option<String>,
    #[arg(long, global = true)]
    split_fraction: Option<f64>,
    /// Bare `--folds` means 5.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "5")]
    folds: Option<i64>,
    #[arg(long, global = true)]
    strata: Option<i64>,
    #[arg(long, global = true)]
    block_len: Option<i64>,
    #[arg(long, global = true)]
    seed: Option<i64>,
    /// kernel, bilinear or constant.
    #[arg(long, global = true)]
    mean_kind: Option<String>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    breakpoint: Option<f64>,
    /// mean, cov, both or none.
    #[arg(long, global = true)]
    tune: Option<String>,
    /// Comma-separated bandwidths; `inf` is the marginal estimator.
    #[arg(long, global = true, value_delimiter = ',')]
    grid: Option<Vec<String>>,
    /// per_pair, global or correlation_per_pair.
    #[arg(long, global = true)]
    cov_target: Option<String>,
    /// One covariance bandwidth for all entries; same as `--cov-target global`.
    #[arg(long, global = true, conflicts_with = "cov_target")]
    global_h: bool,
    #[arg(long, global = true)]
    bandwidth: Option<String>,
    /// clip_eigen, jitter or off.
    #[arg(long, global = true)]
    psd_policy: Option<String>,
    #[arg(long, global = true)]
    jitter_floor: Option<f64>,
    /// clamp or error.
    #[arg(long, global = true)]
    extrapolation: Option<String>,
    /// zmin:zmax:step.
    #[arg(long, global = true, allow_hyphen_values = true)]
    eval_grid: Option<String>,
    /// Comma-separated: none, mean, full.
    #[arg(long, global = true, value_delimiter = ',')]
    regime: Option<Vec<String>>,
    #[arg(long, global = true)]
    quantile: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    z_split: Option<f64>,
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pca_z: Option<Vec<String>>,
    #[arg(long, global = true, value_delimiter = ',')]
    drop_components: Option<Vec<i64>>,
    #[arg(long, global = true)]
    score_bins: Option<i64>,
    /// constant, linear, logistic or mixed.
    #[arg(long, global = true)]
    scenario: Option<String>,
    /// Samples per confounder grid point.
    #[arg(long, global = true)]
    n: Option<i64>,
    #[arg(long, global = true)]
    runs: Option<i64>,
    #[arg(long, global = true, value_delimiter = ',')]
    h_grid: Option<Vec<String>>,
    /// Thin individual rows instead of whole grid points.
    #[arg(long, global = true)]
    thin_rows: bool,
}

fn strings(v: &[String]) -> Value {
    Value::Array(v.iter().cloned().map(Value::String).collect())
}

fn absolute(p: &Path) -> Value {
    Value::String(std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string())
}

impl Overrides {
    fn apply(&self, out_dir: Option<&Path>, table: &mut Table, simulate_requested: bool) {
        let mut set = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                table.insert(k.into(), v);
            }
        };
        let float = |v: Option<f64>| v.map(Value::Float);
        let int = |v: Option<i64>| v.map(Value::Integer);
        let text = |v: &Option<String>| v.clone().map(Value::String);
        set("out_dir", out_dir.map(absolute));
        set("input", self.input.as_deref().map(absolute));
        set("timestamp_col", text(&self.timestamp_col));
        set("confounder_col", text(&self.confounder_col));
        set("output_cols", self.output_cols.as_deref().map(strings));
        set("resample_period", float(self.resample_period));
        set("phase1_days", float(self.phase1_days));
        set("split", text(&self.split));
        set("split_fraction", float(self.split_fraction));
        set("folds", int(self.folds));
        set("strata", int(self.strata));
        set("block_len", int(self.block_len));
        set("seed", int(self.seed));
        set("mean_kind", text(&self.mean_kind));
        set("breakpoint", float(self.breakpoint));
        set("tune", text(&self.tune));
        set("grid", self.grid.as_deref().map(strings));
        set("cov_target", text(&self.cov_target));
        set("cov_target", self.global_h.then(|| Value::String("global".into())));
        set("bandwidth", text(&self.bandwidth));
        set("psd_policy", text(&self.psd_policy));
        set("jitter_floor", float(self.jitter_floor));
        set("extrapolation", text(&self.extrapolation));
        set("eval_grid", text(&self.eval_grid));
        set("regime", self.regime.as_deref().map(strings));
        set("quantile", float(self.quantile));
        set("z_split", float(self.z_split));
        set("pca_z", self.pca_z.as_deref().map(strings));
        set("drop_components", self.drop_components.as_ref().map(|v| Value::Array(v.iter().map(|&c| Value::Integer(c)).collect())));
        set("score_bins", int(self.score_bins));

        let sim_flags = self.scenario.is_some() || self.n.is_some() || self.runs.is_some() || self.h_grid.is_some() || self.thin_rows;
        if !(sim_flags || simulate_requested) {
            return;
        }
        let sim = table.entry("simulate").or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(sim) = sim else { return };
        let mut set = |k: &str, v: Option<Value>| {
            if let Some(v) = v {
                sim.insert(k.into(), v);
            }
        };
        set("scenario", text(&self.scenario));
        set("n", int(self.n));
        set("runs", int(self.runs));
        set("h_grid", self.h_grid.as_deref().map(strings));
        set("thin_rows", self.thin_rows.then_some(Value::Boolean(true)));
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, ConfigErrors> {
    let (mut table, base) = match &cli.global.config {
        Some(path) => (read_table(path)?, path.parent().map(Path::to_path_buf).unwrap_or_default()),
        None => (Table::new(), PathBuf::new()),
    };
    cli.flags.apply(cli.global.out_dir.as_deref(), &mut table, cli.command == Command::Simulate);
    RunConfig::from_table(&table, &base, cli.global.lenient)
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let normalized = cfg.to_toml();
    if cli.command == Command::Validate {
        std::io::stdout().write_all(normalized.as_bytes())?;
        return Ok(());
    }
    let mut arts = Artifacts::open(&cfg.out_dir, sha256_hex(normalized.as_bytes()), cfg.seed)?;
    let outcome = match cli.command {
        Command::Preprocess => pipeline::preprocess(cfg, &mut arts),
        Command::Tune => pipeline::tune_stage(cfg, &mut arts),
        Command::Fit => pipeline::fit_stage(cfg, &mut arts),
        Command::Monitor => pipeline::monitor_stage(cfg, &mut arts),
        Command::Pca => pipeline::pca_stage(cfg, &mut arts),
        Command::Simulate => pipeline::simulate_stage(cfg, &mut arts),
        Command::Report => pipeline::report_stage(cfg, &mut arts),
        Command::Run => pipeline::run_all(cfg, &mut arts),
        Command::Validate => unreachable!(),
    };
    arts.finish(&outcome).context("finalizing manifest")?;
    outcome
}

fn init_logging(g: &Global) {
    let level = match (g.quiet, g.verbose) {
        (true, _) => LevelFilter::Error,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(&cli.global);
    let stage = cli.command.name();
    let module = cli.command.module();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(errs) => {
            if cli.global.json_errors {
                let list: Vec<_> = errs.0.iter().map(|e| serde_json::json!({ "key": e.key, "message": e.message })).collect();
                eprintln!("{}", serde_json::json!({ "stage": "config", "errors": list }));
            } else {
                eprintln!("error: {errs}");
            }
            return ExitCode::from(2);
        }
    };
    match execute(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.global.json_errors {
                eprintln!("{}", serde_json::json!({ "stage": stage, "module": module, "message": format!("{e:#}") }));
            } else {
                eprintln!("error: {stage} ({module}): {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
