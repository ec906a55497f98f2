use thiserror::Error;

use crate::fabric::FabricError;
use crate::matrix::LinalgError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unrecoverable failure: {0}")]
    Unrecoverable(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, Error>;
