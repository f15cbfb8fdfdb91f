//! Synthetic multimodal benchmark harness.
//!
//! Builds deterministic scene corpora (2-D grids or 1-D strips of object
//! symbols rendered as perceptual patches), trains the toy model on them,
//! and runs the end-to-end experiments: yes/no object-presence QA with
//! random/popular/adversarial negative splits, object-listing captions,
//! edit-mode and regularization ablations, overhead timing, and relevance
//! heatmap rendering. A CLI in `src/main.rs` fronts all of it.

pub mod config;
pub mod corpus;
pub mod harness;
pub mod heatmap;
pub mod report;
pub mod scene;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] lime_core::model::ModelError),
    #[error(transparent)]
    Lime(#[from] lime_core::lime::LimeError),
    #[error(transparent)]
    Metrics(#[from] lime_core::metrics::MetricsError),
    #[error(transparent)]
    Relevance(#[from] lime_core::relevance::RelevanceError),
    #[error(transparent)]
    Tensor(#[from] lime_core::tensor::TensorError),
    #[error("i/o: {0}")]
    Io(String),
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, BenchError>;
