//! Error types shared by every module in the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the data, model and training layers.
///
/// Variants are grouped by how callers are expected to react: input and
/// parse problems are user-fixable, protocol mismatches are configuration
/// mistakes, and the numerical variants signal that a computation could not
/// be completed even after the built-in recovery steps.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller supplied arguments that violate a documented precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A data file could not be parsed. `line` is 1-based; 0 means the
    /// problem is not tied to a specific line (e.g. an empty file).
    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    /// An I/O failure, annotated with the path that was being accessed.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// The requested evaluation protocol cannot run on the given data,
    /// e.g. a hold-out rule that needs addition order on an unordered set.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A kernel submatrix stayed singular even after jitter was added.
    /// Training skips the offending observation; other callers surface it.
    #[error("singular kernel submatrix (still singular after jitter)")]
    SingularKernel,

    /// A computation produced or encountered non-finite values.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for the variants that indicate a numerical breakdown rather
    /// than bad input or configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::SingularKernel | Error::Numerical(_))
    }
}
