use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },

    #[error("conflict: duplicate trace_id {0:?}")]
    Conflict(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("capacity exceeded: sequence of {needed} tokens, context holds {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("incompatible format: {0}")]
    Incompatible(String),

    #[error("join error: {0}")]
    Join(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("loss mask selects no tokens")]
    EmptySupport,

    #[error("format error: {0}")]
    Format(String),

    #[error("answer {0:?} never appears in any segment")]
    NoDecision(String),

    #[error("unsupported by this oracle: {0}")]
    Unsupported(String),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("judge gave no boxed 0/1 verdict after two rounds")]
    JudgeUndecided,

    #[error("pipeline order: stage {stage:?} must run first (missing {missing})")]
    PipelineOrder { stage: String, missing: PathBuf },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status for this error: 2 usage or config, 3 pipeline
    /// order, 4 data, 5 external service.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::PipelineOrder { .. } => 3,
            Self::Transport(_) | Self::JudgeUndecided => 5,
            _ => 4,
        }
    }
}
