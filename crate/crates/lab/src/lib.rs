//! Experiment harness: datasets, training, evaluation and planner sweeps.

pub mod cli;
pub mod dataset;
pub mod eval;
pub mod sweep;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("generation failed: {0}")]
    GenerationFailed(String),
    #[error(transparent)]
    Grid(#[from] cameta::gridworld::GridError),
    #[error(transparent)]
    Plan(#[from] cameta::planners::PlanError),
    #[error(transparent)]
    Sim(#[from] cameta::simulator::SimError),
    #[error(transparent)]
    Graph(#[from] cameta::hetgraph::HetGraphError),
    #[error(transparent)]
    Model(#[from] cameta::nn::NnError),
}
