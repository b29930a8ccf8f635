//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the pipeline.
#[derive(Debug, Error)]
pub enum MamaError {
    /// A required CSV column is missing or the schema is inconsistent.
    #[error("schema error: {0}")]
    Schema(String),
    /// A data row failed to parse. Row indices are 1-based over data rows.
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),
    /// A caption template could not be resolved against a record.
    #[error("template error: {0}")]
    Template(String),
    /// Tensor shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),
    /// Degenerate numeric input (zero vector, non-finite value, ...).
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Invalid operation input (empty batch, bad index, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Token/feature bookkeeping disagrees (SEP count, missing CLS, ...).
    #[error("alignment error: {0}")]
    Alignment(String),
    /// Checkpoint manifest does not match the running configuration.
    #[error("version error: {0}")]
    Version(String),
    /// Zero-shot spec cannot be realized against the template.
    #[error("spec error: {0}")]
    Spec(String),
    #[error("io error: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl MamaError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        MamaError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MamaError>;
