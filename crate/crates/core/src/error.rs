use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto process exit codes
/// (config 2, dependency 3, numerical 4).
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: stage `{stage}` requires `{missing}` — run that stage first")]
    Dependency { stage: String, missing: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// Exit code contract: 0 ok, 2 config error, 3 dependency error,
    /// 4 numerical failure, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            Error::Dependency { .. } => 3,
            Error::Numerical(_) | Error::Eval(_) => 4,
            Error::Io(_) => 1,
        }
    }
}
