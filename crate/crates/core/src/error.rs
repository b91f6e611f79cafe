use thiserror::Error;

#[derive(Debug, Error)]
pub enum GssmError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("reconstruction error: {0}")]
    Reconstruction(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("feature error: {0}")]
    Feature(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Training { epoch: usize, message: String },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("attribution error for token `{token}`: {message}")]
    Attribution { token: String, message: String },
    #[error("generator spec error: {0}")]
    Spec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, GssmError>;
