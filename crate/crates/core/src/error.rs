//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, MutareError>;

#[derive(Error, Debug)]
pub enum MutareError {
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input data failed validation (unbalanced panel, malformed CSV, ...).
    #[error("invalid data: {0}")]
    Data(String),

    /// A whitened design matrix was rank deficient.
    #[error("singular design in {context}: offending column(s) {columns:?}")]
    Singular { context: String, columns: Vec<usize> },

    /// A quantity that must be finite was not, or a closed-form step broke down.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An iterative routine hit its cap; carries the best point found.
    #[error("{context} did not converge: {detail}")]
    NonConvergence { context: String, detail: String },

    /// A fit-pipeline stage failed; wraps the underlying error.
    #[error("fit pipeline stage '{stage}' failed: {source}")]
    Pipeline {
        stage: &'static str,
        #[source]
        source: Box<MutareError>,
    },

    /// Too many Monte Carlo replicates failed to summarize honestly.
    #[error("harness failure: {0}")]
    Harness(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl MutareError {
    /// Tag an error with the pipeline stage it came from.
    pub fn at_stage(self, stage: &'static str) -> Self {
        MutareError::Pipeline {
            stage,
            source: Box::new(self),
        }
    }
}
