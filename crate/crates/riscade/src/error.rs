//! Error taxonomy shared across the toolkit.
//!
//! Errors are split by what the caller can do about them: configuration
//! problems (fix the config file / CLI flags), shape problems (caller passed
//! inconsistent dimensions), numerical problems (singular or indefinite
//! matrices), and artifact problems (on-disk containers or checkpoints that
//! fail validation). The CLI maps `Config` to exit code 2 and the artifact
//! integrity family to exit code 3.

use thiserror::Error;

/// Validation failures for binary dataset containers and checkpoints.
///
/// Each corruption mode is a distinct variant so tests (and users) can tell
/// a wrong file apart from a damaged one.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {found} (supported: {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("header/payload disagreement: {0}")]
    SizeMismatch(String),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
}

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or internally inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// An index is outside its documented 1-based or 0-based range.
    #[error("index error: {0}")]
    Index(String),

    /// A function argument is invalid for reasons other than configuration
    /// (for example a NaN passed to a numeric routine).
    #[error("argument error: {0}")]
    Argument(String),

    /// Array dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A linear system could not be solved.
    #[error("singular matrix: {0}")]
    Singular(String),

    /// A matrix expected to be positive semidefinite has a significantly
    /// negative eigenvalue.
    #[error("matrix not positive semidefinite: min eigenvalue {min_eig:.3e}")]
    NotPsd { min_eig: f64 },

    /// Training diverged (NaN/Inf loss).
    #[error("training diverged: {0}")]
    Diverged(String),

    /// A stored artifact failed structural validation.
    #[error("format error: {0}")]
    Format(#[from] FormatError),

    /// An artifact parsed correctly but its contents are inconsistent
    /// (e.g. a container whose declared shapes disagree with the run config).
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration errors, 3 for
    /// artifact format/integrity errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format(_) | Error::Integrity(_) => 3,
            _ => 1,
        }
    }
}
