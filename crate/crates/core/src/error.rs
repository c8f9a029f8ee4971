use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("attention row {row} has no admissible key (malformed mask)")]
    FullyMasked { row: usize },

    #[error("every target position equals the ignore index")]
    AllIgnored,

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("tokenizer: {0}")]
    Tokenizer(String),

    #[error("corpus too small: training reached {achieved} of {requested} vocabulary entries")]
    CorpusTooSmall { achieved: usize, requested: usize },

    #[error("token id {id} is outside the vocabulary (size {size})")]
    IdOutOfRange { id: u32, size: usize },

    #[error("input of {len} tokens exceeds capacity {capacity}")]
    Overflow { len: usize, capacity: usize },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("record {record}: field `{field}`: {reason}")]
    Schema {
        record: String,
        field: String,
        reason: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("incompatible artifacts: {0}")]
    Incompatible(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric, 4 verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } | Error::Json(_) => 1,
            Error::Tokenizer(_)
            | Error::CorpusTooSmall { .. }
            | Error::IdOutOfRange { .. }
            | Error::Overflow { .. }
            | Error::Io { .. }
            | Error::Schema { .. }
            | Error::Checkpoint(_)
            | Error::Incompatible(_) => 2,
            Error::FullyMasked { .. }
            | Error::AllIgnored
            | Error::NonScalarLoss(_)
            | Error::NonFinite(_) => 3,
            Error::Verification(_) => 4,
        }
    }
}
