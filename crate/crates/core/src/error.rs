use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("singular orbit: {0}")]
    SingularOrbit(String),
    #[error("no convergence: {0}")]
    NoConvergence(String),
    #[error("integration failure at t = {t}: {reason}")]
    Integration { t: f64, reason: String },
    #[error("history does not cover t = {0}")]
    HistoryTooShort(f64),
    #[error("no crossings")]
    NoCrossings,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
