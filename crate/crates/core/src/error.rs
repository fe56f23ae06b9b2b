use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box ({0}, {1}, {2}, {3})")]
    InvalidBox(f64, f64, f64, f64),
    #[error("degenerate box")]
    DegenerateBox,
    #[error("non-finite offset code")]
    NonFiniteCode,
    #[error("empty micro-tube")]
    EmptyMicroTube,
    #[error("insufficient history: need at least 2 boxes, got {0}")]
    InsufficientHistory(usize),
    #[error("target frame {target} is not after the last history frame {last}")]
    TargetNotAfterHistory { target: u32, last: u32 },
    #[error("insufficient priors: {gts} ground truths for {priors} priors")]
    InsufficientPriors { gts: usize, priors: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("temporal discontinuity: {0}")]
    TemporalDiscontinuity(String),
    #[error("unsorted detection stream at t={0}")]
    UnsortedStream(u32),
    #[error("no tubes")]
    NoTubes,
    #[error("empty tube")]
    EmptyTube,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
