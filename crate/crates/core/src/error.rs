//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors surfaced by geometry, rendering, fitting, and file I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A mathematical precondition was violated (degenerate input, non-unit
    /// normal, zero normalizer, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A continuous coordinate fell outside its valid sampling window.
    /// Sampling never clamps; clamping would hide fitting divergence.
    #[error("out of range: {0}")]
    OutOfRange(String),

    /// Mismatched dimensions, lengths, or masks between inputs.
    #[error("mismatch: {0}")]
    Mismatch(String),

    /// An operation that needs covered pixels found none.
    #[error("empty coverage: {0}")]
    EmptyCoverage(String),

    /// Optimization failed to make progress.
    #[error("fit diverged: {0}")]
    Diverged(String),

    /// Text parse failure, with 1-based line number.
    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Syntactically valid input using a construct this toolkit does not
    /// support (e.g. quad faces in OBJ).
    #[error("{path}:{line}: unsupported: {msg}")]
    Unsupported {
        path: String,
        line: usize,
        msg: String,
    },

    /// Binary container violation: bad magic, wrong version, truncated
    /// section, or inconsistent recorded sizes.
    #[error("model file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;
