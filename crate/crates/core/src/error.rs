use thiserror::Error;

#[derive(Debug, Error)]
pub enum HrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HrError>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HrError::Dimension(msg.into()))
}
