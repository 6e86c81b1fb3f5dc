use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong between reading a dataset and writing a report.
#[derive(Debug, Error)]
pub enum CalibError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid propagation interval: dt = {0} s")]
    InvalidInterval(f64),

    #[error("IMU stream gap of {0} s exceeds the propagation limit")]
    StreamGap(f64),

    #[error("query stamp {stamp} outside trajectory span [{start}, {end}]")]
    Extrapolation { stamp: f64, start: f64, end: f64 },

    #[error("innovation covariance is singular or ill-conditioned (cond ~ {0:e})")]
    DegenerateMeasurement(f64),

    #[error("chi-square gate supports dimensions 1..=12, got {0}")]
    UnsupportedDimension(usize),

    #[error("point behind camera (depth {0} m)")]
    BehindCamera(f64),

    #[error("insufficient observations: {got} available, {need} required")]
    InsufficientObservations { got: usize, need: usize },

    #[error("scan-match fitness {fitness} exceeds threshold {threshold}")]
    MeasurementQuality { fitness: f64, threshold: f64 },

    #[error("measurement arrived before the LiDAR anchor was set")]
    AnchorUnset,

    #[error("plane normals disagree in sign (dot = {0})")]
    SignFault(f64),

    #[error("stamp {stamp} is older than the cloning history horizon (oldest {oldest})")]
    HistoryExpired { stamp: f64, oldest: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("insufficient overlap: {0} correspondences")]
    InsufficientOverlap(usize),

    #[error("dataset fault: {0}")]
    DatasetFault(String),

    #[error("filter diverged: covariance trace {trace:e} exceeds {limit:e}")]
    Divergence { trace: f64, limit: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CalibError>;
