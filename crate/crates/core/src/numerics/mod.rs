//! Models, losses, gradients and data for desk-scale training.

mod dataset;
pub mod idx;
mod model;
mod vector;

pub use dataset::{sample_minibatch, sample_minibatch_from, synthetic_blobs, Dataset, Minibatch, SyntheticSpec};
pub use model::{
    argmax, backward_grad, evaluate_accuracy, forward_loss, full_loss, ForwardPass, ModelKind, ModelSpec, ParamBlock,
};
pub use vector::{sgd_update, Vector};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("vector must not be empty")]
    Empty,
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("batch size {size} out of range 1..={available}")]
    BatchSize { size: usize, available: usize },
    #[error("sample index {index} out of bounds for {len} samples")]
    IndexOutOfBounds { index: usize, len: usize },
    #[error("label {label} at sample {index} is not below num_classes {num_classes}")]
    InvalidLabel { index: usize, label: usize, num_classes: usize },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("idx format: {0}")]
    Idx(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for NumericsError {
    fn from(e: std::io::Error) -> Self {
        NumericsError::Io(e.to_string())
    }
}
