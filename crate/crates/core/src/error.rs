use std::path::PathBuf;

use crate::complex_linalg::LinalgError;
use crate::dft::Domain;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),

    #[error("expected a {expected:?} image, got {found:?}")]
    WrongDomain { expected: Domain, found: Domain },

    #[error("size {size} is not divisible by the subsampling factor {factor}")]
    NotDivisible { size: usize, factor: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: String, found: String },

    #[error("bad dimensions: {0}")]
    BadDims(String),

    #[error("singular unfolding system{}", fmt_pixel(.pixel))]
    SingularSystem { pixel: Option<(usize, usize)> },

    #[error("covariance scale tag {found} is not valid here (expected {expected})")]
    BadTag { expected: String, found: String },

    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),

    #[error("empty input")]
    EmptyInput,

    #[error("bad scale parameter {0}")]
    BadScale(f64),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("zero variance sample")]
    ZeroVariance,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error in {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn fmt_pixel(pixel: &Option<(usize, usize)>) -> String {
    match pixel {
        Some((x, y)) => format!(" at pixel group x={x}, y={y}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn dims(expected: impl Into<String>, found: impl Into<String>) -> Self {
        Error::DimMismatch {
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
