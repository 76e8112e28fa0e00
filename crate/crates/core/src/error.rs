//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input data (generator matrices, measures, parameter sets).
    #[error("validation error: {0}")]
    Validation(String),

    /// Dimension mismatch between coupled objects.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// State left the configured bounding box during integration.
    #[error("state blow-up at t = {time:.6}: |x| = {norm:.3e} exceeds guard radius {guard:.3e}")]
    BlowUp { time: f64, norm: f64, guard: f64 },

    /// A model callback produced NaN or infinity.
    #[error("non-finite value at t = {time:.6} in {context}")]
    NonFinite { time: f64, context: String },

    /// Limit-cycle detection gave up.
    #[error("no limit cycle found: {0}")]
    NoCycle(String),

    /// A precondition of an operation was violated.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// Experiment configuration is inconsistent with the model.
    #[error("configuration error: {0}")]
    Config(String),

    /// Linear algebra failure (singular solve, failed eigendecomposition).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// A per-path failure inside a batch, with the path index attached.
    #[error("path {path} failed: {source}")]
    Path {
        path: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn precondition(msg: impl Into<String>) -> Self {
        Error::Precondition(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn in_path(self, path: usize) -> Self {
        Error::Path {
            path,
            source: Box::new(self),
        }
    }
}
