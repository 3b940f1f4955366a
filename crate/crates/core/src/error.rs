use thiserror::Error;

/// Errors produced by estimation, simulation and I/O routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("forward filter collapsed: zero predictive mass at time index {t}")]
    FilterCollapse { t: usize },

    #[error("state {state} collapsed: total smoothed weight {weight:.3e} below floor {floor:.3e}")]
    StateCollapse { state: usize, weight: f64, floor: f64 },

    #[error("all {restarts} restarts failed; last error: {last}")]
    AllRestartsFailed { restarts: usize, last: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line surface: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Dimension(_) => 2,
            Error::NotPositiveDefinite(_)
            | Error::FilterCollapse { .. }
            | Error::StateCollapse { .. }
            | Error::AllRestartsFailed { .. }
            | Error::Numerical(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
