use std::path::Path;

use lmcascade_core::Error as CoreError;

pub type AppResult<T> = Result<T, AppError>;

/// Failure classes of the command line, each with its exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{key}: {msg}")]
    Validation { key: String, msg: String },
    #[error("{0}")]
    Runtime(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Validation { .. } => 2,
            AppError::Runtime(_) => 3,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AppError::Usage(_) => "usage",
            AppError::Validation { .. } => "validation",
            AppError::Runtime(_) => "runtime",
        }
    }

    /// One-line `key=value` diagnostic for stderr.
    pub fn diagnostic(&self) -> String {
        let msg = |s: &str| s.replace(['\n', '\r'], " ").replace('"', "'");
        match self {
            AppError::Validation { key, msg: m } => {
                format!("error kind=validation key={key} msg=\"{}\"", msg(m))
            }
            other => format!("error kind={} msg=\"{}\"", other.kind(), msg(&other.to_string())),
        }
    }

    pub fn validation(key: impl Into<String>, msg: impl Into<String>) -> Self {
        AppError::Validation {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        AppError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { key, msg } => AppError::Validation { key, msg },
            e => AppError::Runtime(e.to_string()),
        }
    }
}
