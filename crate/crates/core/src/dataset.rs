//! Ingestion, cleaning, resampling and splitting of output/confounder records.
//!
//! Raw CSV rows become [`TimedRecord`]s (values may be missing), which are
//! resampled onto a uniform grid, gap-filled and finally packed into an
//! [`AlignedDataset`] with no missing values. Splits for bandwidth tuning are
//! drawn by contiguous blocks, stratified on the block-mean confounder.

use std::io::Read;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

const SECONDS_PER_DAY: f64 = 86_400.0;

/// One timestamped observation pair `(z, x)`; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedRecord {
    pub timestamp: f64,
    pub z: Option<f64>,
    pub x: Vec<Option<f64>>,
}

/// Column mapping of an input CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub timestamp: String,
    pub confounder: String,
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub channels: Vec<String>,
    pub units: Vec<String>,
    /// Sample period in seconds.
    pub sample_period: f64,
}

impl DatasetMeta {
    pub fn unnamed(p: usize, sample_period: f64) -> Self {
        Self { channels: (1..=p).map(|k| format!("x{k}")).collect(), units: vec![String::new(); p], sample_period }
    }
}

/// Complete, index-aligned outputs `X` (n×p) and confounder series `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    timestamps: Vec<f64>,
    z: Vec<f64>,
    x: DMatrix<f64>,
    meta: DatasetMeta,
}

impl AlignedDataset {
    pub fn new(timestamps: Vec<f64>, z: Vec<f64>, x: DMatrix<f64>, meta: DatasetMeta) -> Result<Self> {
        let n = x.nrows();
        if z.len() != n {
            return Err(Error::Shape { what: "confounder series", expected: n, actual: z.len() });
        }
        if timestamps.len() != n {
            return Err(Error::Shape { what: "timestamps", expected: n, actual: timestamps.len() });
        }
        if x.ncols() == 0 {
            return Err(Error::Schema("dataset needs at least one output channel".into()));
        }
        if meta.channels.len() != x.ncols() {
            return Err(Error::Shape { what: "channel names", expected: x.ncols(), actual: meta.channels.len() });
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite confounder at row {i}")));
        }
        if let Some(i) = timestamps.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("non-finite timestamp at row {i}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite output value".into()));
        }
        Ok(Self { timestamps, z, x, meta })
    }

    /// Dataset without timestamps; rows are stamped `0, 1, 2, ...`.
    pub fn from_xz(x: DMatrix<f64>, z: Vec<f64>) -> Result<Self> {
        let n = x.nrows();
        let p = x.ncols();
        Self::new((0..n).map(|i| i as f64).collect(), z, x, DatasetMeta::unnamed(p, 1.0))
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn timestamps(&self) -> &[f64] {
        &self.timestamps
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn z_range(&self) -> Option<(f64, f64)> {
        let lo = self.z.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo <= hi).then_some((lo, hi))
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let p = self.p();
        let x = DMatrix::from_fn(indices.len(), p, |r, c| self.x[(indices[r], c)]);
        Self {
            timestamps: indices.iter().map(|&i| self.timestamps[i]).collect(),
            z: indices.iter().map(|&i| self.z[i]).collect(),
            x,
            meta: self.meta.clone(),
        }
    }

    /// Splits into rows with `timestamp < cutoff` and the rest.
    pub fn split_at_time(&self, cutoff: f64) -> (Self, Self) {
        let (before, after): (Vec<usize>, Vec<usize>) = (0..self.n()).partition(|&i| self.timestamps[i] < cutoff);
        (self.subset(&before), self.subset(&after))
    }

    pub fn from_records(records: &[TimedRecord], meta: DatasetMeta) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Parameter(format!("need at least 2 records, got {}", records.len())));
        }
        let p = records[0].x.len();
        let mut x = DMatrix::zeros(records.len(), p);
        let mut z = Vec::with_capacity(records.len());
        for (i, rec) in records.iter().enumerate() {
            if rec.x.len() != p {
                return Err(Error::Shape { what: "record width", expected: p, actual: rec.x.len() });
            }
            z.push(rec.z.ok_or_else(|| Error::Parameter(format!("missing confounder at record {i}")))?);
            for (k, v) in rec.x.iter().enumerate() {
                x[(i, k)] = v.ok_or_else(|| Error::Parameter(format!("missing output {} at record {i}", channel_label(&meta, k))))?;
            }
        }
        Self::new(records.iter().map(|r| r.timestamp).collect(), z, x, meta)
    }

    /// Writes `timestamp,z,<channels...>`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp".to_string(), "z".to_string()];
        header.extend(self.meta.channels.iter().cloned());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row = vec![fmt_f64(self.timestamps[i]), fmt_f64(self.z[i])];
            row.extend((0..self.p()).map(|k| fmt_f64(self.x[(i, k)])));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the layout produced by [`AlignedDataset::write_csv`].
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 3 {
            return Err(Error::Schema("aligned dataset needs timestamp, z and at least one output column".into()));
        }
        let channels: Vec<String> = headers.iter().skip(2).map(str::to_string).collect();
        let schema = Schema { timestamp: headers[0].to_string(), confounder: headers[1].to_string(), outputs: channels.clone() };
        let records = parse_records(rdr, &schema)?;
        if let Some(i) = records.iter().position(|r| r.z.is_none() || r.x.iter().any(Option::is_none)) {
            return Err(Error::Parse { line: i as u64 + 2, message: "aligned dataset contains a missing value".into() });
        }
        let period = estimate_period(&records.iter().map(|r| r.timestamp).collect::<Vec<_>>()).unwrap_or(1.0);
        let p = channels.len();
        Self::from_records(&records, DatasetMeta { channels, units: vec![String::new(); p], sample_period: period })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

fn channel_label(meta: &DatasetMeta, k: usize) -> String {
    meta.channels.get(k).cloned().unwrap_or_else(|| format!("x{}", k + 1))
}

/// Shortest round-trip decimal representation.
pub fn fmt_f64(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        format!("{v}")
    }
}

pub fn load_csv(path: &Path, schema: &Schema) -> Result<Vec<TimedRecord>> {
    read_csv(std::fs::File::open(path)?, schema)
}

/// Column names of a CSV file.
pub fn read_header(path: &Path) -> Result<Vec<String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

/// Parses a CSV stream; non-numeric or empty value cells become missing.
/// Output is sorted by timestamp (stable).
pub fn read_csv<R: Read>(reader: R, schema: &Schema) -> Result<Vec<TimedRecord>> {
    if schema.outputs.is_empty() {
        return Err(Error::Schema("no output columns configured".into()));
    }
    let rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut records = parse_records(rdr, schema)?;
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(records)
}

fn parse_records<R: Read>(mut rdr: csv::Reader<R>, schema: &Schema) -> Result<Vec<TimedRecord>> {
    let headers = rdr.headers()?.clone();
    let find =
        |name: &str| headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema(format!("column `{name}` not found in header")));
    let t_col = find(&schema.timestamp)?;
    let z_col = find(&schema.confounder)?;
    let x_cols = schema.outputs.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse { line, message: e.to_string() }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let ts_cell = rec.get(t_col).unwrap_or("");
        let timestamp = ts_cell
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Parse { line, message: format!("invalid timestamp `{ts_cell}`") })?;
        let cell = |c: usize| rec.get(c).and_then(|s| s.parse::<f64>().ok()).filter(|v| v.is_finite());
        out.push(TimedRecord { timestamp, z: cell(z_col), x: x_cols.iter().map(|&c| cell(c)).collect() });
    }
    Ok(out)
}

/// Median spacing of strictly increasing timestamps.
pub fn estimate_period(timestamps: &[f64]) -> Option<f64> {
    let mut diffs: Vec<f64> = timestamps.windows(2).map(|w| w[1] - w[0]).filter(|d| *d > 0.0).collect();
    if diffs.is_empty() {
        return None;
    }
    diffs.sort_by(f64::total_cmp);
    Some(diffs[diffs.len() / 2])
}

/// Puts records on a uniform grid `t0 + k·period`.
///
/// Outputs are averaged over the records whose nearest grid point is `k`
/// (missing cells ignored); the confounder is linearly interpolated to the
/// grid timestamps. Grid points with no output samples stay missing.
pub fn resample(records: &[TimedRecord], target_period: f64) -> Result<Vec<TimedRecord>> {
    if records.len() < 2 {
        return Err(Error::Parameter(format!("resample needs at least 2 records, got {}", records.len())));
    }
    if !(target_period > 0.0 && target_period.is_finite()) {
        return Err(Error::Parameter(format!("target period must be positive, got {target_period}")));
    }
    let times: Vec<f64> = records.iter().map(|r| r.timestamp).collect();
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Parameter("records must be sorted by timestamp".into()));
    }
    let source_period = estimate_period(&times).ok_or_else(|| Error::Parameter("all records share one timestamp".into()))?;
    if target_period < source_period * (1.0 - 1e-9) {
        return Err(Error::UnsupportedUpsample { target: target_period, source_period });
    }

    let p = records[0].x.len();
    let t0 = times[0];
    let span = times[times.len() - 1] - t0;
    let steps = (span / target_period + 1e-9).floor() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| t0 + k as f64 * target_period).collect();

    let mut sums = vec![vec![0.0; p]; grid.len()];
    let mut counts = vec![vec![0usize; p]; grid.len()];
    for rec in records {
        let k = ((rec.timestamp - t0) / target_period).round();
        if k < 0.0 || k as usize >= grid.len() {
            continue;
        }
        let k = k as usize;
        for (c, v) in rec.x.iter().enumerate() {
            if let Some(v) = v {
                sums[k][c] += v;
                counts[k][c] += 1;
            }
        }
    }

    let z_known: Vec<(f64, f64)> = records.iter().filter_map(|r| r.z.map(|z| (r.timestamp, z))).collect();
    let tol = 1e-9 * target_period;
    Ok(grid
        .iter()
        .enumerate()
        .map(|(k, &t)| TimedRecord {
            timestamp: t,
            z: interpolate_at(&z_known, t, tol),
            x: (0..p).map(|c| (counts[k][c] > 0).then(|| sums[k][c] / counts[k][c] as f64)).collect(),
        })
        .collect())
}

/// Linear interpolation over time-sorted `(t, v)` knots; `None` outside the knot span.
fn interpolate_at(knots: &[(f64, f64)], t: f64, tol: f64) -> Option<f64> {
    if knots.is_empty() {
        return None;
    }
    let idx = knots.partition_point(|(kt, _)| *kt < t);
    if idx < knots.len() && (knots[idx].0 - t).abs() <= tol {
        return Some(knots[idx].1);
    }
    if idx > 0 && (t - knots[idx - 1].0).abs() <= tol {
        return Some(knots[idx - 1].1);
    }
    if idx == 0 || idx == knots.len() {
        return None;
    }
    let (t_a, v_a) = knots[idx - 1];
    let (t_b, v_b) = knots[idx];
    let w = (t - t_a) / (t_b - t_a);
    Some(v_a + w * (v_b - v_a))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FillOutcome {
    pub records: Vec<TimedRecord>,
    pub trimmed_leading: usize,
    pub trimmed_trailing: usize,
}

/// Trims leading/trailing records until every channel is present, then fills
/// interior gaps by linear interpolation in time.
pub fn fill_missing(records: &[TimedRecord]) -> Result<FillOutcome> {
    if records.is_empty() {
        return Ok(FillOutcome { records: Vec::new(), trimmed_leading: 0, trimmed_trailing: 0 });
    }
    let p = records[0].x.len();
    let get = |r: &TimedRecord, c: usize| if c == 0 { r.z } else { r.x[c - 1] };
    let name = |c: usize| if c == 0 { "z".to_string() } else { format!("x{c}") };

    for c in 0..=p {
        if records.iter().all(|r| get(r, c).is_none()) {
            return Err(Error::EmptyChannel(name(c)));
        }
    }
    let complete = |r: &TimedRecord| (0..=p).all(|c| get(r, c).is_some());
    let (Some(start), Some(end)) = (records.iter().position(complete), records.iter().rposition(complete)) else {
        return Err(Error::EmptyChannel("no record has every channel observed".into()));
    };
    let trimmed_leading = start;
    let trimmed_trailing = records.len() - 1 - end;
    if trimmed_leading + trimmed_trailing > 0 {
        warn!("fill_missing: trimmed {trimmed_leading} leading and {trimmed_trailing} trailing records with missing values");
    }

    let window = &records[start..=end];
    let mut out: Vec<TimedRecord> = window.to_vec();
    for c in 0..=p {
        let knots: Vec<(f64, f64)> = window.iter().filter_map(|r| get(r, c).map(|v| (r.timestamp, v))).collect();
        for rec in out.iter_mut() {
            let slot = if c == 0 { &mut rec.z } else { &mut rec.x[c - 1] };
            if slot.is_none() {
                *slot = interpolate_at(&knots, rec.timestamp, 0.0);
            }
        }
    }
    Ok(FillOutcome { records: out, trimmed_leading, trimmed_trailing })
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitMode {
    Holdout { fraction: f64 },
    KFold { folds: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strata {
    /// Equal-width intervals over the observed confounder range.
    EqualWidth(usize),
    /// Explicit ascending interval edges; must cover the observed range.
    Edges(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub mode: SplitMode,
    pub block_len: usize,
    pub strata: Strata,
}

pub const DEFAULT_STRATA: usize = 5;

impl SplitPlan {
    pub fn holdout(fraction: f64, block_len: usize) -> Self {
        Self { mode: SplitMode::Holdout { fraction }, block_len, strata: Strata::EqualWidth(DEFAULT_STRATA) }
    }

    pub fn kfold(folds: usize, block_len: usize) -> Self {
        Self { mode: SplitMode::KFold { folds }, block_len, strata: Strata::EqualWidth(DEFAULT_STRATA) }
    }

    pub fn with_strata(mut self, strata: Strata) -> Self {
        self.strata = strata;
        self
    }

    /// Number of records in one day at the given sample period.
    pub fn day_block_len(sample_period: f64) -> usize {
        ((SECONDS_PER_DAY / sample_period).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_len == 0 {
            return Err(Error::Parameter("block length must be at least 1".into()));
        }
        match self.mode {
            SplitMode::Holdout { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                return Err(Error::Parameter(format!("holdout fraction must lie in (0,1), got {fraction}")));
            }
            SplitMode::KFold { folds } if folds < 2 => {
                return Err(Error::Parameter(format!("K-fold needs K >= 2, got {folds}")));
            }
            _ => {}
        }
        match &self.strata {
            Strata::EqualWidth(0) => Err(Error::Parameter("strata count must be at least 1".into())),
            Strata::Edges(e) if e.len() < 2 || e.windows(2).any(|w| w[1] <= w[0]) => {
                Err(Error::Parameter("strata edges must be strictly ascending with at least two entries".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Row indices (ascending) of one train/validation pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

impl Fold {
    pub fn materialize(&self, data: &AlignedDataset) -> (AlignedDataset, AlignedDataset) {
        (data.subset(&self.train), data.subset(&self.validation))
    }
}

/// Splits by contiguous blocks, stratified on block-mean confounder.
///
/// Holdout returns one fold; K-fold returns `K` folds whose validation sets
/// partition the rows.
pub fn split(data: &AlignedDataset, plan: &SplitPlan, seed: u64) -> Result<Vec<Fold>> {
    plan.validate()?;
    let n = data.n();
    let blocks: Vec<(usize, usize)> = (0..n).step_by(plan.block_len).map(|s| (s, (s + plan.block_len).min(n))).collect();
    let (lo, hi) = data.z_range().ok_or_else(|| Error::Parameter("cannot split an empty dataset".into()))?;
    let edges = match &plan.strata {
        Strata::EqualWidth(count) => {
            let width = (hi - lo) / *count as f64;
            (0..=*count).map(|i| if i == *count { hi } else { lo + i as f64 * width }).collect::<Vec<_>>()
        }
        Strata::Edges(e) => {
            if e[0] > lo || e[e.len() - 1] < hi {
                return Err(Error::Parameter(format!(
                    "strata edges [{}, {}] do not cover observed range [{lo}, {hi}]",
                    e[0],
                    e[e.len() - 1]
                )));
            }
            e.clone()
        }
    };
    let n_strata = edges.len() - 1;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (b, &(s, e)) in blocks.iter().enumerate() {
        let mean = data.z[s..e].iter().sum::<f64>() / (e - s) as f64;
        let idx = if hi > lo || matches!(plan.strata, Strata::Edges(_)) {
            edges.partition_point(|&edge| edge <= mean).saturating_sub(1).min(n_strata - 1)
        } else {
            0
        };
        members[idx].push(b);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        if !(hi == lo && matches!(plan.strata, Strata::EqualWidth(_))) {
            return Err(Error::EmptyStratum { lo: edges[empty], hi: edges[empty + 1] });
        }
        members.retain(|m| !m.is_empty());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expand = |bs: &[usize]| -> Vec<usize> {
        let mut rows: Vec<usize> = bs.iter().flat_map(|&b| blocks[b].0..blocks[b].1).collect();
        rows.sort_unstable();
        rows
    };

    match plan.mode {
        SplitMode::Holdout { fraction } => {
            let mut val_blocks = Vec::new();
            let mut train_blocks = Vec::new();
            for m in members.iter_mut() {
                m.shuffle(&mut rng);
                let take = ((fraction * m.len() as f64).round() as usize).min(m.len());
                val_blocks.extend_from_slice(&m[..take]);
                train_blocks.extend_from_slice(&m[take..]);
            }
            Ok(vec![Fold { train: expand(&train_blocks), validation: expand(&val_blocks) }])
        }
        SplitMode::KFold { folds } => {
            let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); folds];
            let mut offset = 0;
            for m in members.iter_mut() {
                m.shuffle(&mut rng);
                for (j, &b) in m.iter().enumerate() {
                    assigned[(offset + j) % folds].push(b);
                }
                offset += m.len();
            }
            if assigned.iter().any(Vec::is_empty) {
                return Err(Error::Parameter(format!("{} blocks cannot fill {folds} folds", blocks.len())));
            }
            Ok((0..folds)
                .map(|f| {
                    let train: Vec<usize> = (0..folds).filter(|&g| g != f).flat_map(|g| assigned[g].iter().copied()).collect();
                    Fold { train: expand(&train), validation: expand(&assigned[f]) }
                })
                .collect())
        }
    }
}
