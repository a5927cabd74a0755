use std::path::PathBuf;

use cellsearch_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("step {step}: token {field} = {value} is outside [0, {bound})")]
    TokenOutOfRange {
        step: usize,
        field: &'static str,
        value: i64,
        bound: usize,
    },

    #[error("invalid genotype: {0}")]
    Genotype(String),

    #[error("aggregation inputs are not harmonized: {0}")]
    Unharmonized(String),

    #[error("metrics: {0}")]
    Metrics(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("search: {0}")]
    Search(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("malformed file {}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
