use thiserror::Error;

/// Pipeline-level errors. The CLI maps these onto its exit-code contract:
/// usage problems 64, malformed data 65, numeric failures 70, collapse 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] ndgrad::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training aborted: collapse detected at step {step}")]
    Collapse { step: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI contract.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 64,
            Error::Parse { .. } | Error::Data(_) | Error::Checkpoint(_) | Error::Io(_) => 65,
            Error::Numeric(_) | Error::Engine(_) => 70,
            Error::Collapse { .. } => 2,
        }
    }
}
