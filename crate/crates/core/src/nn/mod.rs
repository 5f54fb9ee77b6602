//! Dense numeric core and the arrival-time model.

pub mod model;
pub mod tape;
pub mod train;

use thiserror::Error;

pub use model::{
    forward_recurrent, loss, loss_and_grad, predict, Feedback, GraphInput, Message, MessageGraph, Mode,
    ModelConfig, ModelParams,
};
pub use train::{
    collect_predictions, load_checkpoint, mae, mape, rmse, save_checkpoint, train, Adam, EpochLog,
    TrainConfig,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NaNDetected(String),
    #[error("teacher forcing requires labels")]
    MissingLabels,
    #[error("percentage error undefined for a non-positive label")]
    ZeroLabel,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
