use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("codec failure at level {level}: {reason}")]
    CodecFailure { level: u32, reason: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("level {level} outside range [{lo}, {hi}]")]
    OutOfRange { level: i64, lo: u32, hi: u32 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("shape error: {0}")]
    ShapeError(String),
    #[error("cannot place {n} disjoint {size}x{size} patches in a {width}x{height} image")]
    InfeasiblePatching {
        n: usize,
        size: usize,
        width: usize,
        height: usize,
    },
    #[error("layout error: {reason}; offending paths: {paths:?}")]
    LayoutError { reason: String, paths: Vec<PathBuf> },
    #[error("degenerate samples: variance {variance:e} below 1e-9")]
    DegenerateSamples { variance: f64 },
    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },
    #[error("GEV fit did not converge after {iterations} iterations (trace tail: {trace:?})")]
    NoConvergence { iterations: usize, trace: Vec<f64> },
    #[error("label sequence does not cover the level range: {0}")]
    IncompleteSequence(String),
    #[error("invalid search spec: {0}")]
    InvalidSpec(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("patch {0} has a non-positive or non-finite weight")]
    NonPositiveWeight(usize),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("degenerate variance in {0}")]
    DegenerateVariance(&'static str),
    #[error("ladder has no rung at level {0}")]
    MissingRung(u32),
    #[error("too few records: {got} records for {folds} folds")]
    TooFewRecords { got: usize, folds: usize },
    #[error("non-finite loss in batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("weight load error: {0}")]
    WeightLoadError(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stage {0} has not been position-encoded")]
    MissingPositionEncoding(usize),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
