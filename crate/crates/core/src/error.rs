use thiserror::Error;

#[derive(Debug, Error)]
pub enum BstError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error("stability error: {0}")]
    Stability(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("oracle invalid: {0}")]
    OracleInvalid(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = BstError> = std::result::Result<T, E>;

pub(crate) fn dim_err(msg: impl Into<String>) -> BstError {
    BstError::Dimension(msg.into())
}

pub(crate) fn config_err(msg: impl Into<String>) -> BstError {
    BstError::Config(msg.into())
}
