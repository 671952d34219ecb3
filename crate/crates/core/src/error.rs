use thiserror::Error;

/// Errors surfaced by the store, the simulator and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("out of memory")]
    OutOfMemory,
    #[error("object of {size} bytes exceeds the largest size class ({max} bytes)")]
    TooLarge { size: usize, max: usize },
    #[error("index group full")]
    TableFull,
    #[error("recovery blocked: {0}")]
    RecoveryBlocked(String),
    #[error("liveness violation: {0}")]
    Liveness(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
