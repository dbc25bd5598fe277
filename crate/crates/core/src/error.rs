//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CncError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("vocabulary error: unknown word `{0}`")]
    Vocabulary(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("inpainting error (backend `{backend}`): {message}")]
    Inpaint { backend: String, message: String },

    #[error("staging error: {0}")]
    Staging(String),

    #[error("state error: {0}")]
    State(String),

    #[error("training failure: {message} (final metric {final_metric})")]
    TrainingFailure { message: String, final_metric: f64 },

    #[error("checkpoint incompatibility: {0}")]
    Incompatible(String),

    #[error("checkpoint load error: {0}")]
    CheckpointLoad(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CncError>;

impl CncError {
    pub fn shape(msg: impl Into<String>) -> Self {
        CncError::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        CncError::Config(msg.into())
    }
    pub fn argument(msg: impl Into<String>) -> Self {
        CncError::Argument(msg.into())
    }
}
