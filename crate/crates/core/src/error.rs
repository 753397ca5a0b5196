use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit. Variant names double as the error
/// identifiers printed by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("AngleAtCutLocus: rotation angle {angle} is within 1e-6 of pi")]
    AngleAtCutLocus { angle: f64 },

    #[error("DimensionMismatch: {0}")]
    DimensionMismatch(String),

    #[error("NonPositiveThreshold: threshold must be > 0, got {0}")]
    NonPositiveThreshold(f64),

    #[error("EmptySequence: {0}")]
    EmptySequence(&'static str),

    #[error("TargetExceedsCloud: requested {requested} points from a cloud of {available}")]
    TargetExceedsCloud { requested: usize, available: usize },

    #[error("InsufficientPointsInRadius: requested {requested} points but only {available} lie within the radius")]
    InsufficientPointsInRadius { requested: usize, available: usize },

    #[error("DegeneratePointmap: {0}")]
    DegeneratePointmap(String),

    #[error("InsufficientCorrespondences: need at least {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },

    #[error("NoConsensus: best hypothesis has {inliers} inliers out of {total}")]
    NoConsensus { inliers: usize, total: usize },

    #[error("DisconnectedGraph: view {0} is not reachable from view 0")]
    DisconnectedGraph(usize),

    #[error("WrongChannelCount: expected {expected} channels, got {got}")]
    WrongChannelCount { expected: usize, got: usize },

    #[error("CountMismatch: {0}")]
    CountMismatch(String),

    #[error("LengthMismatch: {0}")]
    LengthMismatch(String),

    #[error("ImageTooSmall: {width}x{height} is smaller than the {min}x{min} window")]
    ImageTooSmall { width: usize, height: usize, min: usize },

    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),

    #[error("ParseError: {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("IoFailure: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), message: message.into() }
    }
}
