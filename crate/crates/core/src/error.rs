use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NcmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("numeric failure at epoch {epoch}, batch {batch}: {detail}")]
    NumericFailure {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("numeric check failed: {0}")]
    Disagreement(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, NcmError>;

impl NcmError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        NcmError::InvalidArgument(msg.into())
    }

    /// Process exit code: 2 config/argument, 3 numeric, 4 io.
    pub fn exit_code(&self) -> i32 {
        match self {
            NcmError::InvalidArgument(_) | NcmError::NotFound(_) | NcmError::Config(_) => 2,
            NcmError::NumericFailure { .. } | NcmError::Disagreement(_) => 3,
            NcmError::Io(_) | NcmError::Csv(_) | NcmError::Json(_) => 4,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(NcmError::invalid("x").exit_code(), 2);
        assert_eq!(NcmError::Config("x".into()).exit_code(), 2);
        let e = NcmError::NumericFailure { epoch: 1, batch: 0, detail: "nan".into() };
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("epoch 1"));
        let e: NcmError = io::Error::other("disk").into();
        assert_eq!(e.exit_code(), 4);
    }
}
