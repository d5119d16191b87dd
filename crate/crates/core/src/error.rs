use std::io;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("{}", config_message(*.line, .msg))]
    Config { line: usize, msg: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("sampler chain failed: {0}")]
    ChainFailed(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}

/// Line 0 marks a command-line override rather than a file line.
fn config_message(line: usize, msg: &str) -> String {
    if line == 0 {
        format!("config override: {msg}")
    } else {
        format!("config line {line}: {msg}")
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
