use thiserror::Error;

/// Failure classes of the command-line tools, each with its own exit code.
#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) | AppError::Io(_) => 3,
            AppError::Numeric(_) => 4,
        }
    }
}

impl From<qbye_core::Error> for AppError {
    fn from(e: qbye_core::Error) -> Self {
        use qbye_core::Error as E;
        match e {
            E::Config(_) => AppError::Config(e.to_string()),
            E::NonFinite(_) | E::DegenerateEmbedding => AppError::Numeric(e.to_string()),
            _ => AppError::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Data(e.to_string())
    }
}
