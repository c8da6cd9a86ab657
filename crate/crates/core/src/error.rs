use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("scale matrix is singular")]
    SingularScale,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("design matrix is rank deficient: {0}")]
    DegenerateDesign(String),

    #[error("non-finite draw at component {index}")]
    SamplingFailure { index: usize },

    #[error(
        "truncated draw failed after {attempts} attempts (estimated acceptance rate {acceptance_rate:.3e})"
    )]
    TruncationFailure { attempts: usize, acceptance_rate: f64 },

    #[error("unit {index} would be a certainty unit (inclusion probability {pi})")]
    CertaintyUnit { index: usize, pi: f64 },

    #[error("row {row}: {message}")]
    Csv { row: usize, message: String },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pilot chain failed: {0}")]
    PilotFailure(String),

    #[error("non-finite state in block `{block}` at iteration {iteration}")]
    NonFiniteState { block: &'static str, iteration: usize },

    #[error("all importance weights are zero or non-finite")]
    DegenerateImportanceWeights,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    CsvFormat(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
