use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Incompatible tensor shapes, reporting both operands.
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of vocabulary (size {vocab})")]
    Vocab { id: u32, vocab: usize },

    #[error("gradient/parameter key mismatch: {0}")]
    KeyMismatch(String),

    #[error("{path}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        path: String,
        stored: u32,
        computed: u32,
    },

    #[error("{path}: {reason}")]
    Format { path: String, reason: String },

    #[error("training aborted: non-finite {term} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        term: &'static str,
        epoch: usize,
        batch: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
