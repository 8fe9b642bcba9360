use thiserror::Error;

use crate::nucfeat::FeatureError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("slide has no patches")]
    EmptySlide,
    #[error("invalid cohort spec: {0}")]
    Spec(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("optimizer error: {0}")]
    Optimizer(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("export error: {0}")]
    Export(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("incompatible: {0}")]
    Incompatible(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
