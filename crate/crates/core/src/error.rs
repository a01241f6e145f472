use thiserror::Error;

/// Errors produced by the solver library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stale topology: expected generation {expected}, mesh is at {found}")]
    StaleTopology { expected: u64, found: u64 },
    #[error("layout mismatch: {0}")]
    Layout(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("numerical domain error: {0}")]
    NumericalDomain(String),
    #[error("cell model error: {0}")]
    Model(String),
    #[error("contract violation: {0}")]
    ContractViolation(String),
    #[error("solution diverged at t = {time} ms")]
    Divergence { time: f64 },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("config error at {key}{}: {message}", line.map(|l| format!(" (line {l})")).unwrap_or_default())]
    Config {
        key: String,
        line: Option<usize>,
        message: String,
    },
    #[error("benchmark failure: {0}")]
    Benchmark(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, line: Option<usize>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            line,
            message: message.into(),
        }
    }
}
