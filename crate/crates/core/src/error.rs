use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid architecture, hyperparameter or tensor shape combination.
    #[error("configuration error: {0}")]
    Config(String),

    /// The downsampling schedule does not fit the input resolution.
    #[error("schedule error: {0}")]
    Schedule(String),

    /// Train-mode batch norm needs more than one value per channel.
    #[error("degenerate batch: batch norm over {0} value(s) per channel")]
    DegenerateBatch(usize),

    /// No filter count satisfies the requested parameter budget.
    #[error("infeasible budget: {0}")]
    Infeasible(String),

    /// Dataset content violates its container format or label range.
    #[error("data error: {0}")]
    Data(String),

    /// File size does not match the expected record layout.
    #[error("format error in {path}: expected {expected} bytes, found {found}")]
    Format {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    /// Checkpoint file is corrupt, truncated or of an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A loss or gradient became NaN or infinite.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    /// Gradient table does not line up with the tape or parameter set.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
