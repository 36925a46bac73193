use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("cannot draw {n} unique keys from a universe of {universe}")]
    UniverseTooSmall { n: u64, universe: u64 },

    #[error("invalid workload: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Engine(#[from] learnkv::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, BenchError>;
