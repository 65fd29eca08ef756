//! One error type for the whole pipeline.
//!
//! Variants are grouped by how the command-line harness maps them to exit
//! codes: configuration/validation problems, I/O and file-format problems,
//! and numeric divergence during training.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Matrix or batch dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A file could not be parsed; the message names the location.
    #[error("parse error: {0}")]
    Parse(String),

    /// Data content violates a documented contract (e.g. a label not in {0,1}).
    #[error("validation error: {0}")]
    Validation(String),

    /// A name lookup failed (label id, split name, parameter name, ...).
    #[error("unknown name: {0}")]
    Lookup(String),

    /// An index is out of bounds for the structure it addresses.
    #[error("index out of bounds: {0}")]
    Bounds(String),

    /// Every position of a sequence/row is masked out.
    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    /// Requested teacher operating point is unreachable for a label.
    #[error("infeasible calibration: {0}")]
    Calibration(String),

    /// Training produced a non-finite loss or gradient.
    #[error("divergence at epoch {epoch}, batch {batch}: {detail}")]
    Divergence {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    /// A numeric check failed outside of training (e.g. non-finite gradient
    /// during a finite-difference check).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file failed its integrity checks (magic, checksum, truncation).
    #[error("corrupt file: {0}")]
    Corrupt(String),

    /// A file has a valid envelope but an unsupported version or kind.
    #[error("incompatible format: {0}")]
    Incompatible(String),
}

impl Error {
    /// Exit-code class used by the CLI: 2 = configuration, 3 = I/O or
    /// file format, 4 = numeric divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Config(_)
            | Error::Parse(_)
            | Error::Validation(_)
            | Error::Lookup(_)
            | Error::Bounds(_)
            | Error::DegenerateMask(_)
            | Error::Calibration(_)
            | Error::Numeric(_) => 2,
            Error::Io(_) | Error::Corrupt(_) | Error::Incompatible(_) => 3,
            Error::Divergence { .. } => 4,
        }
    }
}
