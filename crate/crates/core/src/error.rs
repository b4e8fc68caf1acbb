use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("fixed-point solver diverged after {iterations} iterations (last residual {last_residual:e})")]
    Diverged {
        iterations: usize,
        last_residual: f64,
        trace: Vec<f64>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no supervised cells in sample")]
    NoSupervision,

    #[error("could not generate a usable grid after {retries} attempts")]
    Degenerate { retries: usize },

    #[error("training aborted at epoch {epoch}: {diverged} of {batches} batches diverged")]
    TooManyDiverged {
        epoch: usize,
        diverged: usize,
        batches: usize,
    },

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Structural problems found while decoding dataset or checkpoint files.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("file truncated at byte {0}")]
    Truncated(usize),
    #[error("invalid field: {0}")]
    Invalid(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
