use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("training diverged in phase {phase}, epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        phase: u8,
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

/// Failures specific to reading or writing checkpoint files.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic bytes)")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("unknown ordering flag {0}")]
    Ordering(u8),

    #[error("entry {name}: shape {found:?} does not match architecture {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("entry {0} missing from checkpoint")]
    MissingEntry(String),

    #[error("unexpected entry {0} in checkpoint")]
    UnexpectedEntry(String),

    #[error("malformed entry: {0}")]
    Malformed(String),
}
