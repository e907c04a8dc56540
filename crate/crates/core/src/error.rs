use std::path::PathBuf;

use cfqa_tensor::checkpoint::CheckpointError;
use cfqa_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CfqaError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("line {line}: malformed JSON: {msg}")]
    MalformedLine { line: usize, msg: String },
    #[error("line {line}: schema error: {msg}")]
    Schema { line: usize, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint was trained with config hash {found}, current config hashes to {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("excising the predicted span would leave an empty context")]
    ExcisionRefused,
}

pub type Result<T, E = CfqaError> = std::result::Result<T, E>;

impl CfqaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
