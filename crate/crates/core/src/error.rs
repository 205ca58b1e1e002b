//! Error type shared across the toolkit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene has no neighbors (n < 2)")]
    NoNeighbors,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("missing ground-truth future for agent {0}")]
    NoGroundTruth(String),

    #[error("insufficient history: observation needs at least 2 points")]
    InsufficientHistory,

    #[error("attention weights violate the simplex constraint: {0}")]
    InvalidWeights(String),

    #[error("predictor {0} is not differentiable")]
    NotDifferentiable(String),

    #[error("backward requires a scalar loss node")]
    NonScalarLoss,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("scene id mismatch: {0}")]
    SceneMismatch(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
