use thiserror::Error;

use crate::microtensor::Shape4;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape error in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: Shape4,
        right: Shape4,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("resource limit: {0}")]
    ResourceLimit(String),

    #[error("divergence at epoch {epoch}, minibatch {minibatch}: {detail}")]
    Divergence {
        epoch: usize,
        minibatch: usize,
        detail: String,
    },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn shape(op: &'static str, left: Shape4, right: Shape4) -> Self {
        Error::Shape { op, left, right }
    }
}
