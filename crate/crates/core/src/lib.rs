pub mod baselines;
pub mod gridworld;
pub mod hetgraph;
pub mod nn;
pub mod planners;
pub mod selection;
pub mod simulator;
