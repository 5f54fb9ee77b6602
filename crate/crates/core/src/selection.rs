//! Time-constraint validation and buffer-time path selection, plus the
//! sequential planning loop that evaluates suggested routes with the
//! arrival-time model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::GridMap;
use crate::hetgraph::{HetGraph, HetGraphError, StaticLayer};
use crate::nn::{predict, GraphInput, ModelParams, NnError};
use crate::planners::{astar, suggest_routes, EdgePenalties, Path, PlanError, DEFAULT_PENALTY_FACTOR};
use crate::simulator::AgentTask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("{etas} arrivals for {constraints} constraints")]
    LengthMismatch { etas: usize, constraints: usize },
    #[error("no candidates")]
    NoCandidates,
    #[error("no candidate meets every time constraint; lowest cost is candidate {best_invalid}")]
    NoValidPath { best_invalid: usize },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Graph(#[from] HetGraphError),
    #[error(transparent)]
    Model(#[from] NnError),
}

/// `sum_i (max(TC) - (TC_i - eta_i))^2`; smaller means larger, more even
/// buffers.
pub fn path_cost(etas: &[f64], tc: &[f64]) -> Result<f64, SelectionError> {
    if etas.len() != tc.len() || etas.is_empty() {
        return Err(SelectionError::LengthMismatch {
            etas: etas.len(),
            constraints: tc.len(),
        });
    }
    let max_tc = tc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(etas
        .iter()
        .zip(tc)
        .map(|(&eta, &c)| (max_tc - (c - eta)).powi(2))
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEvaluation {
    pub candidate_index: usize,
    pub etas: Vec<f64>,
    pub valid: bool,
    pub cost: f64,
}

/// Whether an arrival exactly at the deadline meets it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Deadline {
    Inclusive,
    Exclusive,
}

pub fn evaluate(
    index: usize,
    etas: &[f64],
    tc: &[f64],
    deadline: Deadline,
) -> Result<CandidateEvaluation, SelectionError> {
    let cost = path_cost(etas, tc)?;
    let valid = etas.iter().zip(tc).all(|(&e, &c)| match deadline {
        Deadline::Inclusive => e <= c,
        Deadline::Exclusive => e < c,
    });
    Ok(CandidateEvaluation {
        candidate_index: index,
        etas: etas.to_vec(),
        valid,
        cost,
    })
}

/// Index of the cheapest valid candidate; the lower index wins ties.
pub fn select_path(candidates: &[Vec<f64>], tc: &[f64]) -> Result<usize, SelectionError> {
    select_path_with(candidates, tc, Deadline::Inclusive)
}

pub fn select_path_with(
    candidates: &[Vec<f64>],
    tc: &[f64],
    deadline: Deadline,
) -> Result<usize, SelectionError> {
    let evals = candidates
        .iter()
        .enumerate()
        .map(|(i, e)| evaluate(i, e, tc, deadline))
        .collect::<Result<Vec<_>, _>>()?;
    choose(&evals)
}

fn cheapest<'a>(evals: impl Iterator<Item = &'a CandidateEvaluation>) -> Option<usize> {
    let mut best: Option<&CandidateEvaluation> = None;
    for e in evals {
        if best.map_or(true, |b| e.cost < b.cost) {
            best = Some(e);
        }
    }
    best.map(|b| b.candidate_index)
}

fn choose(evals: &[CandidateEvaluation]) -> Result<usize, SelectionError> {
    if evals.is_empty() {
        return Err(SelectionError::NoCandidates);
    }
    if let Some(i) = cheapest(evals.iter().filter(|e| e.valid)) {
        return Ok(i);
    }
    let best_invalid = cheapest(evals.iter()).expect("non-empty");
    Err(SelectionError::NoValidPath { best_invalid })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Routes suggested per agent.
    pub routes: usize,
    pub penalty_factor: f64,
    pub deadline: Deadline,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            routes: 4,
            penalty_factor: DEFAULT_PENALTY_FACTOR,
            deadline: Deadline::Inclusive,
        }
    }
}

/// Outcome of one agent's route choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDecision {
    pub agent_id: u32,
    pub candidates: Vec<CandidateEvaluation>,
    pub chosen: usize,
    /// False when no candidate met every constraint and the cheapest was
    /// committed anyway.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    pub paths: Vec<Path>,
    pub decisions: Vec<AgentDecision>,
}

/// Predicted goal arrival of every robot when executing `plans`.
pub fn predicted_goal_arrivals(
    params: &ModelParams,
    layer: &Arc<StaticLayer>,
    plans: &[Path],
    tasks: &[AgentTask],
) -> Result<Vec<f64>, SelectionError> {
    let graph = HetGraph::build(Arc::clone(layer), plans, tasks, 0)?;
    let input = GraphInput::from_hetgraph(&graph);
    let pred = predict(params, &input)?;
    Ok(graph.last_edges().into_iter().map(|e| pred[e]).collect())
}

/// Starting from independent shortest paths, each agent in id order picks
/// among its suggested routes the one whose predicted arrivals (for all
/// robots) best satisfy the time constraints, and commits it before the
/// next agent plans.
pub fn plan_with_model(
    map: &GridMap,
    layer: &Arc<StaticLayer>,
    tasks: &[AgentTask],
    params: &ModelParams,
    cfg: &PlannerConfig,
) -> Result<PlanOutcome, SelectionError> {
    let none = EdgePenalties::new();
    let mut plans = tasks
        .iter()
        .map(|t| astar(map, t.start, t.goal, &none))
        .collect::<Result<Vec<_>, _>>()?;
    let tc: Vec<f64> = tasks.iter().map(|t| f64::from(t.time_constraint)).collect();
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by_key(|&i| tasks[i].id);

    let mut decisions = Vec::with_capacity(tasks.len());
    for i in order {
        let task = &tasks[i];
        let routes = suggest_routes(map, task.start, task.goal, cfg.routes, cfg.penalty_factor)?;
        let mut evals = Vec::with_capacity(routes.len());
        for (k, route) in routes.iter().enumerate() {
            let mut trial = plans.clone();
            trial[i] = route.clone();
            let etas = predicted_goal_arrivals(params, layer, &trial, tasks)?;
            evals.push(evaluate(k, &etas, &tc, cfg.deadline)?);
        }
        let (chosen, valid) = match choose(&evals) {
            Ok(k) => (k, true),
            Err(SelectionError::NoValidPath { best_invalid }) => (best_invalid, false),
            Err(e) => return Err(e),
        };
        plans[i] = routes[chosen].clone();
        decisions.push(AgentDecision {
            agent_id: task.id,
            candidates: evals,
            chosen,
            valid,
        });
    }
    Ok(PlanOutcome {
        paths: plans,
        decisions,
    })
}
