use std::io;

use thiserror::Error;

/// Failures while decoding one of the binary containers (KSPD1, KSPB1, KSGP1, KSEM1).
#[derive(Debug, Error)]
pub enum ParseError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("non-finite value in {section}")]
    NonFinite { section: &'static str },
    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),
    #[error("trailing bytes: {0} unread")]
    TrailingBytes(usize),
    #[error("invalid content: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("ill-conditioned correlation matrix: {0}")]
    IllConditioned(String),
    #[error("likelihood optimization failed (best theta {best_theta:?}): {reason}")]
    FitFailed { best_theta: Vec<f64>, reason: String },
    #[error("incompatible cases: {0}")]
    IncompatibleCases(String),
    #[error("degenerate weights at x_new = {x_new:?}: |sum of raw weights| = {sum:e}")]
    DegenerateWeights { x_new: Vec<f64>, sum: f64 },
    #[error("undefined baseline: reference value is zero")]
    UndefinedBaseline,
    #[error("unsupported grid: {0}")]
    UnsupportedGrid(String),
    #[error("no film found at station x = {station}")]
    NoFilm { station: f64 },
    #[error("non-uniform sampling: {0}")]
    NonUniformSampling(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
