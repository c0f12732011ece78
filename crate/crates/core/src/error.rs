use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unsupported upsample: target period {target}s is shorter than source period {source_period}s")]
    UnsupportedUpsample { target: f64, source_period: f64 },

    #[error("channel `{0}` has no non-missing values")]
    EmptyChannel(String),

    #[error("stratification error: stratum [{lo}, {hi}) contains no block")]
    EmptyStratum { lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("fit error on channel {channel}: {message}")]
    Fit { channel: usize, message: String },

    #[error("confounder value {z} outside validity interval [{lo}, {hi}]")]
    Extrapolation { z: f64, lo: f64, hi: f64 },

    #[error("validation confounder {z} outside training coverage [{lo}, {hi}]")]
    Coverage { z: f64, lo: f64, hi: f64 },

    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    Shape { what: &'static str, expected: usize, actual: usize },

    #[error("sparse region at z = {z}: kernel weight mass {mass:e} below floor {floor:e}")]
    SparseRegion { z: f64, mass: f64, floor: f64 },

    #[error("channel {channel} has zero variance at z = {z}")]
    DegenerateChannel { channel: usize, z: f64 },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("tuning failed for {0}: no candidate produced a finite loss")]
    Tuning(String),

    #[error("covariance at z = {z} is singular even after jitter")]
    Singular { z: f64 },

    #[error("component {component} at z = {z} has eigenvalue {eigenvalue:e} below floor {floor:e}")]
    DegenerateComponent { component: usize, z: f64, eigenvalue: f64, floor: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
