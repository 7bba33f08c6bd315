use thiserror::Error;

#[derive(Debug, Error)]
pub enum BudsError {
    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("missing prerequisite artifact `{artifact}` (run `{stage}` first)")]
    StageDependency { artifact: String, stage: &'static str },
    #[error(transparent)]
    Runtime(#[from] buds_core::Error),
}

impl BudsError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        BudsError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            BudsError::Config { .. } => 2,
            BudsError::StageDependency { .. } => 3,
            BudsError::Runtime(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, BudsError>;
