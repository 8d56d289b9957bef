use thiserror::Error;

/// Errors produced by the analysis pipeline.
///
/// Input problems (bad files, unusable data, bad arguments) are kept distinct
/// from internal numerical issues so callers can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// A line of an input file could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// The data set is too small or too sparse to analyze.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// The sampling interval cannot be handled.
    #[error("unsupported cadence: {interval} s does not divide 86400 s")]
    UnsupportedCadence { interval: u32 },

    /// Latitude outside the supported range.
    #[error("unsupported latitude: {latitude} deg (|lat| must be < 66)")]
    UnsupportedLatitude { latitude: f64 },

    /// A caller-supplied argument is out of range or inconsistent.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The data itself is degenerate (for example all-zero power).
    #[error("invalid data: {0}")]
    InvalidData(String),

    /// Shapes of two objects that must agree do not.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// Underlying file I/O failure.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A stored artifact is malformed or has an unknown version.
    #[error("artifact error: {0}")]
    Artifact(String),

    /// An internal numerical guarantee failed (solver invariant violated).
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
