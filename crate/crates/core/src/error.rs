use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("experiment id {0} out of range 1..=21")]
    ExperimentOutOfRange(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid class index {class} (expected < {classes})")]
    InvalidClass { class: i64, classes: usize },

    #[error("volume has no nonzero voxels")]
    EmptyVolume,

    #[error("need at least {needed} cases to split, got {got}")]
    TooFewCases { needed: usize, got: usize },

    #[error("degenerate score matrix: {blocks} blocks x {treatments} treatments (need >= 2 x 2)")]
    DegenerateMatrix { blocks: usize, treatments: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("parity violation: {0}")]
    ParityViolation(String),

    #[error("bad magic in tensor file")]
    BadMagic,

    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u8),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("tensor file truncated")]
    Truncated,

    #[error("tensor dimensions overflow addressable size")]
    DimensionOverflow,

    #[error("malformed input: {0}")]
    Parse(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
