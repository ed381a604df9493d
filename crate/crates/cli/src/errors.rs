//! Run errors carry the exit-code class: input problems (bad config,
//! missing files) exit 1, runtime failures exit 2.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("input error: {0}")]
    Input(String),
    #[error("{stage}: {message}")]
    Runtime { stage: &'static str, message: String },
}

impl RunError {
    pub fn input(message: impl Into<String>) -> Self {
        RunError::Input(message.into())
    }

    pub fn runtime(stage: &'static str, error: impl std::fmt::Display) -> Self {
        RunError::Runtime {
            stage,
            message: error.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Input(_) => 1,
            RunError::Runtime { .. } => 2,
        }
    }
}
