use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the mathematical domain of an operation (non-finite weight,
    /// out-of-range parameter, step past the end of a schedule, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A configuration value failed validation.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// The gradient estimator is not strictly positive where the caller needs it
    /// to be (reciprocal integral, optimizer-state remap, Lipschitz lower bound).
    #[error("gradient estimator is not positive at w = {at}")]
    NonPositiveEstimator { at: f64 },

    #[error("constants undefined for {0}: the estimator has no positive lower bound")]
    ConstantsUndefined(&'static str),

    #[error("binary quantizer has no representable range")]
    NoRepresentableRange,

    /// Loss, activation or update became non-finite.
    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("truncated IDX file {path}: expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("malformed trace row {row}: {msg}")]
    TraceRow { row: usize, msg: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure_finite(w: f64, what: &str) -> Result<()> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} must be finite, got {w}")))
    }
}
