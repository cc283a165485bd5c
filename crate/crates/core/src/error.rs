use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("degenerate embedding: row {row} has norm {norm:e}")]
    DegenerateEmbedding { row: usize, norm: f64 },

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("token id {id} out of vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: {report}")]
    NonFinite { step: u64, report: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
