//! Metrics, Adam, the training loop and checkpoints.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{block_specs, loss_and_grad, predict, GraphInput, Mode, ModelConfig, ModelParams};
use super::NnError;

fn check_lengths(pred: &[f64], label: &[f64]) -> Result<(), NnError> {
    if pred.len() != label.len() || pred.is_empty() {
        return Err(NnError::ShapeMismatch(format!(
            "{} predictions for {} labels",
            pred.len(),
            label.len()
        )));
    }
    Ok(())
}

/// Mean absolute percentage error, in percent.
pub fn mape(pred: &[f64], label: &[f64]) -> Result<f64, NnError> {
    check_lengths(pred, label)?;
    if label.iter().any(|&y| y <= 0.0) {
        return Err(NnError::ZeroLabel);
    }
    let total: f64 = pred.iter().zip(label).map(|(p, y)| (p - y).abs() / y).sum();
    Ok(100.0 * total / label.len() as f64)
}

pub fn mae(pred: &[f64], label: &[f64]) -> Result<f64, NnError> {
    check_lengths(pred, label)?;
    let total: f64 = pred.iter().zip(label).map(|(p, y)| (p - y).abs()).sum();
    Ok(total / label.len() as f64)
}

pub fn rmse(pred: &[f64], label: &[f64]) -> Result<f64, NnError> {
    check_lengths(pred, label)?;
    let total: f64 = pred.iter().zip(label).map(|(p, y)| (p - y).powi(2)).sum();
    Ok((total / label.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative decay applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub mode: Mode,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            lr_decay: 0.75,
            decay_every: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 20,
            mode: Mode::Dms,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: Vec<Array2<f64>> = params.blocks.iter().map(|b| Array2::zeros(b.raw_dim())).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &[Array2<f64>], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for ((w, g), (m, v)) in params
            .blocks
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(w).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            });
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-graph training loss seen during the epoch, in percent.
    pub train_mape: f64,
}

/// Sequential batch-size-one training; graphs are visited in a seeded
/// shuffled order each epoch.
pub fn train(
    params: &mut ModelParams,
    data: &[GraphInput],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ModelParams),
) -> Result<Vec<EpochLog>, NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if cfg.lr <= 0.0 {
        return Err(NnError::InvalidConfig(format!("learning rate {}", cfg.lr)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let (loss, grads) = loss_and_grad(params, &data[i], cfg.mode)
                .map_err(|e| NnError::NaNDetected(format!("epoch {epoch}, graph {i}: {e}")))?;
            total += loss;
            adam.step(params, &grads, lr, cfg);
            if !params.is_finite() {
                return Err(NnError::NaNDetected(format!("parameters after epoch {epoch}, graph {i}")));
            }
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_mape: total / data.len() as f64,
        };
        on_epoch(&entry, params);
        log.push(entry);
    }
    Ok(log)
}

/// Predictions and labels of every scored edge across `data`.
pub fn collect_predictions(
    params: &ModelParams,
    data: &[GraphInput],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>), NnError> {
    let mut pred = Vec::new();
    let mut naive = Vec::new();
    let mut label = Vec::new();
    for g in data {
        let labels = g.labels.as_ref().ok_or(NnError::MissingLabels)?;
        let p = predict(params, g)?;
        for i in g.scored_edges() {
            pred.push(p[i]);
            naive.push(g.eta_naive[i]);
            label.push(labels[i]);
        }
    }
    Ok((pred, naive, label))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Block {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    blocks: Vec<Block>,
}

const CHECKPOINT_FORMAT: &str = "eta-model";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(params: &ModelParams) -> String {
    let blocks = block_specs(&params.config)
        .into_iter()
        .zip(&params.blocks)
        .map(|((name, _), b)| Block {
            name,
            shape: [b.nrows(), b.ncols()],
            data: b.iter().copied().collect(),
        })
        .collect();
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: params.config,
        blocks,
    };
    serde_json::to_string(&ck).expect("checkpoint serializes")
}

pub fn load_checkpoint(text: &str) -> Result<ModelParams, NnError> {
    let ck: Checkpoint =
        serde_json::from_str(text).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            ck.format, ck.version
        )));
    }
    let specs = block_specs(&ck.config);
    if specs.len() != ck.blocks.len() {
        return Err(NnError::Checkpoint(format!(
            "{} blocks, expected {}",
            ck.blocks.len(),
            specs.len()
        )));
    }
    let mut blocks = Vec::with_capacity(specs.len());
    for ((name, (r, c)), b) in specs.into_iter().zip(ck.blocks) {
        if b.name != name || b.shape != [r, c] || b.data.len() != r * c {
            return Err(NnError::Checkpoint(format!(
                "block {} has shape {:?}, expected {name} {:?}",
                b.name,
                b.shape,
                [r, c]
            )));
        }
        blocks.push(Array2::from_shape_vec((r, c), b.data).expect("length checked"));
    }
    let params = ModelParams {
        config: ck.config,
        blocks,
    };
    if !params.is_finite() {
        return Err(NnError::Checkpoint("non-finite parameter".into()));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_vectors() {
        let y = [10.0, 20.0];
        let p = [11.0, 18.0];
        assert!((mape(&p, &y).unwrap() - 10.0).abs() < 1e-12);
        assert!((mae(&p, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!((rmse(&p, &y).unwrap() - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(mape(&y, &y).unwrap(), 0.0);
        assert_eq!(mae(&y, &y).unwrap(), 0.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        assert_eq!(mape(&[0.0], &[4.0]).unwrap(), 100.0);
        assert_eq!(mae(&[0.0], &[4.0]).unwrap(), 4.0);
        assert_eq!(rmse(&[0.0], &[4.0]).unwrap(), 4.0);
        assert_eq!(mape(&[1.0], &[0.0]), Err(NnError::ZeroLabel));
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(7), 0.001);
        assert!((cfg.lr_at(8) - 0.00075).abs() < 1e-18);
        assert!((cfg.lr_at(16) - 0.0005625).abs() < 1e-18);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_guard() {
        let cfg = ModelConfig {
            hidden: 4,
            heads: 2,
            floor_in: 4,
            ..ModelConfig::default()
        };
        let p = ModelParams::init(cfg, 3);
        let text = save_checkpoint(&p);
        assert_eq!(load_checkpoint(&text).unwrap(), p);
        let tampered = text.replacen("\"shape\":[4,4]", "\"shape\":[4,5]", 1);
        assert!(matches!(load_checkpoint(&tampered), Err(NnError::Checkpoint(_))));
    }

    #[test]
    fn adam_moves_against_gradient() {
        let cfg = ModelConfig {
            hidden: 2,
            heads: 1,
            floor_in: 4,
            ..ModelConfig::default()
        };
        let mut p = ModelParams::zeros(cfg);
        let grads: Vec<Array2<f64>> = p.blocks.iter().map(|b| Array2::ones(b.raw_dim())).collect();
        let mut adam = Adam::new(&p);
        let tc = TrainConfig::default();
        adam.step(&mut p, &grads, 0.01, &tc);
        // The first bias-corrected step has magnitude lr.
        assert!(p.blocks.iter().all(|b| b.iter().all(|&v| (v + 0.01).abs() < 1e-9)));
    }
}
