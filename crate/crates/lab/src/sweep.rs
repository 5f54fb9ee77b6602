//! Planner comparison under forced-wait noise. Every planner solves the same
//! tasks; each noise seed is shared across planners.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cameta::baselines::{cbs, pibt, CBS_MAX_AGENTS, CBS_MAX_SIDE};
use cameta::gridworld::GridMap;
use cameta::hetgraph::StaticLayer;
use cameta::nn::ModelParams;
use cameta::planners::{astar, EdgePenalties, Path};
use cameta::selection::{plan_with_model, PlannerConfig};
use cameta::simulator::{makespan, run, soc, AgentTask, SimConfig, SimError, NOISE_LEVELS};

use crate::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Planner {
    NaiveAstar,
    Cameta,
    Pibt,
    Cbs,
}

impl Planner {
    pub const ALL: [Planner; 4] = [Planner::NaiveAstar, Planner::Cameta, Planner::Pibt, Planner::Cbs];

    pub fn name(self) -> &'static str {
        match self {
            Planner::NaiveAstar => "naive-astar",
            Planner::Cameta => "cameta",
            Planner::Pibt => "pibt",
            Planner::Cbs => "cbs",
        }
    }
}

impl fmt::Display for Planner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub noise_levels: Vec<f64>,
    pub n_seeds: usize,
    pub seed: u64,
    pub whca_window: usize,
    pub max_timesteps: u32,
    pub planner: PlannerConfig,
}

impl SweepConfig {
    pub fn new(n_seeds: usize, seed: u64) -> Self {
        let sim = SimConfig::default();
        SweepConfig {
            noise_levels: NOISE_LEVELS.to_vec(),
            n_seeds,
            seed,
            whca_window: sim.whca_window,
            max_timesteps: sim.max_timesteps,
            planner: PlannerConfig::default(),
        }
    }

    /// Noise seed of repetition `k`, identical for every planner and level.
    pub fn noise_seed(&self, k: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64 + 1);
        rng.gen()
    }
}

/// One noisy execution. Metrics are absent when the run timed out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub planner: Planner,
    pub noise: f64,
    pub seed: u64,
    pub completed: bool,
    pub makespan: Option<u32>,
    pub soc: Option<u64>,
    pub forced_waits: usize,
}

/// Mean and sample standard deviation over the completed runs of one
/// (planner, noise) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub planner: Planner,
    pub noise: f64,
    pub seeds: usize,
    pub completed: usize,
    pub mean_makespan: f64,
    pub std_makespan: f64,
    pub mean_soc: f64,
    pub std_soc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    pub summary: Vec<SweepSummary>,
    /// Planners left out, with the reason.
    pub skipped: Vec<(Planner, String)>,
}

impl SweepReport {
    pub fn cell(&self, planner: Planner, noise: f64) -> Option<&SweepSummary> {
        self.summary
            .iter()
            .find(|s| s.planner == planner && s.noise == noise)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(planner: Planner, noise: f64, runs: &[SweepRun]) -> SweepSummary {
    let done: Vec<&SweepRun> = runs.iter().filter(|r| r.completed).collect();
    let ms: Vec<f64> = done.iter().filter_map(|r| r.makespan).map(f64::from).collect();
    let sc: Vec<f64> = done.iter().filter_map(|r| r.soc).map(|s| s as f64).collect();
    let (mean_makespan, std_makespan) = mean_std(&ms);
    let (mean_soc, std_soc) = mean_std(&sc);
    SweepSummary {
        planner,
        noise,
        seeds: runs.len(),
        completed: done.len(),
        mean_makespan,
        std_makespan,
        mean_soc,
        std_soc,
    }
}

pub fn cbs_applicable(map: &GridMap, tasks: &[AgentTask]) -> bool {
    tasks.len() <= CBS_MAX_AGENTS && map.width() <= CBS_MAX_SIDE && map.height() <= CBS_MAX_SIDE
}

fn replay(
    map: &GridMap,
    tasks: &[AgentTask],
    plans: &[Path],
    sim: &SimConfig,
) -> Result<(bool, Option<u32>, Option<u64>, usize), LabError> {
    match run(map, tasks, plans, sim) {
        Ok(trace) => Ok((true, Some(makespan(&trace)?), Some(soc(&trace)?), trace.forced_waits)),
        Err(SimError::Timeout { .. }) => Ok((false, None, None, 0)),
        Err(e) => Err(e.into()),
    }
}

/// Every planner produces paths once, assuming perfect execution; each noisy
/// run replays them through the simulator's local repair. PIBT paths are its
/// joint motion up to each agent's arrival. `model` is required for CAMETA;
/// planners whose preconditions fail are skipped.
pub fn noise_sweep(
    map: &GridMap,
    layer: &Arc<StaticLayer>,
    tasks: &[AgentTask],
    model: Option<&ModelParams>,
    planners: &[Planner],
    cfg: &SweepConfig,
) -> Result<SweepReport, LabError> {
    let none = EdgePenalties::new();
    let mut offline: Vec<(Planner, Vec<Path>)> = Vec::new();
    let mut skipped = Vec::new();
    for &planner in planners {
        match planner {
            Planner::NaiveAstar => {
                let plans = tasks
                    .iter()
                    .map(|t| astar(map, t.start, t.goal, &none))
                    .collect::<Result<Vec<_>, _>>()?;
                offline.push((planner, plans));
            }
            Planner::Cameta => match model {
                Some(params) => {
                    let out = plan_with_model(map, layer, tasks, params, &cfg.planner)
                        .map_err(|e| LabError::GenerationFailed(format!("cameta planning: {e}")))?;
                    offline.push((planner, out.paths));
                }
                None => skipped.push((planner, "no model checkpoint".to_string())),
            },
            Planner::Cbs => {
                if !cbs_applicable(map, tasks) {
                    skipped.push((planner, "outside the CBS size guard".to_string()));
                    continue;
                }
                match cbs(map, tasks) {
                    Ok(plan) => offline.push((planner, plan.paths)),
                    Err(e) => skipped.push((planner, e.to_string())),
                }
            }
            Planner::Pibt => match pibt(map, tasks, cfg.max_timesteps) {
                Ok(trace) => {
                    let paths = trace
                        .trajectories
                        .iter()
                        .zip(&trace.arrivals)
                        .map(|(cells, &a)| Path::new(cells[..=a as usize].to_vec(), 0))
                        .collect();
                    offline.push((planner, paths));
                }
                Err(e) => skipped.push((planner, e.to_string())),
            },
        }
    }

    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for &planner in planners {
        if skipped.iter().any(|(p, _)| *p == planner) {
            continue;
        }
        for &noise in &cfg.noise_levels {
            let mut cell = Vec::with_capacity(cfg.n_seeds);
            for k in 0..cfg.n_seeds {
                let seed = cfg.noise_seed(k);
                let plans = &offline
                    .iter()
                    .find(|(p, _)| *p == planner)
                    .expect("plans computed for every planner not skipped")
                    .1;
                let sim = SimConfig {
                    noise_wait_prob: noise,
                    rng_seed: seed,
                    whca_window: cfg.whca_window,
                    max_timesteps: cfg.max_timesteps,
                };
                let (completed, ms, sc, waits) = replay(map, tasks, plans, &sim)?;
                cell.push(SweepRun {
                    planner,
                    noise,
                    seed,
                    completed,
                    makespan: ms,
                    soc: sc,
                    forced_waits: waits,
                });
            }
            summary.push(summarize(planner, noise, &cell));
            runs.extend(cell);
        }
    }
    Ok(SweepReport {
        runs,
        summary,
        skipped,
    })
}
