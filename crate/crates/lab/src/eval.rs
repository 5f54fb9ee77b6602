//! Arrival-time metrics for the naive baseline and trained models.

use serde::{Deserialize, Serialize};

use cameta::nn::{collect_predictions, mae, mape, rmse, GraphInput, ModelParams};

use crate::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rmse: f64,
    pub mape: f64,
    pub mae: f64,
}

impl Metrics {
    pub fn of(pred: &[f64], label: &[f64]) -> Result<Self, LabError> {
        Ok(Metrics {
            rmse: rmse(pred, label)?,
            mape: mape(pred, label)?,
            mae: mae(pred, label)?,
        })
    }
}

/// One row of the method comparison: a method evaluated on the test graphs of
/// one robot density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub robots: usize,
    pub method: String,
    pub edges: usize,
    pub rmse: f64,
    pub mape: f64,
    pub mae: f64,
}

impl EvalRow {
    fn new(robots: usize, method: &str, edges: usize, m: Metrics) -> Self {
        EvalRow {
            robots,
            method: method.to_string(),
            edges,
            rmse: m.rmse,
            mape: m.mape,
            mae: m.mae,
        }
    }
}

/// Naive and model metrics on the same scored edges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub naive: Metrics,
    pub model: Metrics,
    pub edges: usize,
}

pub fn compare(params: &ModelParams, data: &[GraphInput]) -> Result<Comparison, LabError> {
    let (pred, naive, label) = collect_predictions(params, data)?;
    Ok(Comparison {
        naive: Metrics::of(&naive, &label)?,
        model: Metrics::of(&pred, &label)?,
        edges: label.len(),
    })
}

/// Rows for naive, IMS and DMS on the test graphs of one density. Named
/// models are evaluated in the given order after the naive row.
pub fn evaluate(
    robots: usize,
    models: &[(&str, &ModelParams)],
    data: &[GraphInput],
) -> Result<Vec<EvalRow>, LabError> {
    let mut rows = Vec::with_capacity(models.len() + 1);
    for (k, (name, params)) in models.iter().enumerate() {
        let c = compare(params, data)?;
        if k == 0 {
            rows.push(EvalRow::new(robots, "naive", c.edges, c.naive));
        }
        rows.push(EvalRow::new(robots, name, c.edges, c.model));
    }
    Ok(rows)
}
