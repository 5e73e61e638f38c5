use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("degenerate vector: norm {norm:e} is below the {floor:e} floor")]
    DegenerateVector { norm: f64, floor: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: &'static str, reason: String },

    #[error("finite-difference oracle failed at coordinate {coordinate}: f = {value}")]
    Oracle { coordinate: usize, value: f64 },

    #[error("{path}: row {row}: {reason}")]
    Table {
        path: PathBuf,
        row: usize,
        reason: String,
    },

    #[error("invalid feature set: {0}")]
    FeatureSet(String),

    #[error("cannot sample episode: {0}")]
    Sampling(String),

    #[error("cannot initialize model state: {0}")]
    Init(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("optimization failed at iteration {iteration}: non-finite {block}")]
    Optimization { iteration: usize, block: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            reason: reason.into(),
        }
    }
}
