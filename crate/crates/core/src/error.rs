use std::path::PathBuf;

/// Errors produced anywhere in the retrieval pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate (zero-norm) vector at row {row}")]
    DegenerateVector { row: usize },
    #[error("degenerate gate output at row {row}")]
    DegenerateGate { row: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("non-finite function value during evaluation: {0}")]
    Evaluation(String),
    #[error("non-finite gradient in parameter `{0}`")]
    Divergence(String),
    #[error("ranks are 1-based, got rank 0")]
    IndexConvention,
    #[error("cannot evaluate an empty list of ranks")]
    EmptyEvaluation,
    #[error("dataset consistency: {0}")]
    DatasetConsistency(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("{path}, line {line}: {msg}")]
    Load {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("metadata: {0}")]
    Metadata(String),
    #[error("ingest: {0}")]
    Ingest(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
