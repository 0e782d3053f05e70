use thiserror::Error;

/// Errors surfaced by the numeric substrate.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("numeric fault: non-finite value produced by op `{0}`")]
    NumericFault(&'static str),
    #[error("contract violation: {0}")]
    Contract(String),
}

/// Errors from task generators, parsers and dataset files.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error("parse error at token {position}: {message}")]
    Parse { position: usize, message: String },
    #[error("generation error: {0}")]
    Generation(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Errors from training, evaluation and the runtime benchmark.
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("divergence detected at step {step}: loss {loss} exceeds 10x initial {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },
    #[error("task mismatch: checkpoint was trained on `{checkpoint}`, split is `{split}`")]
    TaskMismatch { checkpoint: String, split: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Tensor(#[from] crate::error::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("toml: {0}")]
    Toml(String),
}
