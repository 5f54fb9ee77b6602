//! Scenario generation: warehouse maps, random tasks, shortest-path plans and
//! noise-free simulated arrival labels.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use cameta::gridworld::{generate_warehouse_map, load_map, save_map, GridMap, WarehouseGenParams};
use cameta::hetgraph::{build_static_layer, HetGraph, StaticLayer};
use cameta::nn::GraphInput;
use cameta::planners::{astar, EdgePenalties, Path};
use cameta::simulator::{run, AgentTask, SimConfig, SimError};

use crate::LabError;

/// Ratio of the time constraint to the naive travel time.
pub const TIME_CONSTRAINT_RATIO: f64 = 1.5;
const TASK_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_maps: usize,
    pub width: usize,
    pub height: usize,
    pub robots: usize,
    pub seed: u64,
    pub tile_size: usize,
    /// Forced-wait probability used when labelling; zero for training data.
    pub label_noise: f64,
    pub shelf_row_period: usize,
    pub shelf_gap_period: usize,
    pub obstacle_jitter: f64,
}

impl DatasetConfig {
    pub fn new(n_maps: usize, width: usize, height: usize, robots: usize, seed: u64) -> Self {
        let defaults = WarehouseGenParams::new(0, width, height);
        DatasetConfig {
            n_maps,
            width,
            height,
            robots,
            seed,
            tile_size: cameta::hetgraph::DEFAULT_TILE_SIZE,
            label_noise: 0.0,
            shelf_row_period: defaults.shelf_row_period,
            shelf_gap_period: defaults.shelf_gap_period,
            obstacle_jitter: defaults.obstacle_density_jitter,
        }
    }

    pub fn map_params(&self, map_seed: u64) -> WarehouseGenParams {
        WarehouseGenParams {
            shelf_row_period: self.shelf_row_period,
            shelf_gap_period: self.shelf_gap_period,
            obstacle_density_jitter: self.obstacle_jitter,
            ..WarehouseGenParams::new(map_seed, self.width, self.height)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub map_id: u64,
    pub map: String,
    pub tasks: Vec<AgentTask>,
    pub plans: Vec<Path>,
    /// Per robot, the simulated timestep at which each plan index was reached.
    pub plan_index_times: Vec<Vec<u32>>,
    pub arrivals: Vec<u32>,
}

impl Scenario {
    pub fn grid(&self) -> Result<GridMap, LabError> {
        Ok(load_map(&self.map)?)
    }

    pub fn static_layer(&self, tile_size: usize) -> Result<Arc<StaticLayer>, LabError> {
        Ok(Arc::new(build_static_layer(&self.grid()?, tile_size)?))
    }

    pub fn graph(&self, tile_size: usize) -> Result<HetGraph, LabError> {
        let mut g = HetGraph::build(self.static_layer(tile_size)?, &self.plans, &self.tasks, 0)?;
        g.attach_labels(&self.plan_index_times)?;
        Ok(g)
    }

    pub fn input(&self, tile_size: usize) -> Result<GraphInput, LabError> {
        Ok(GraphInput::from_hetgraph(&self.graph(tile_size)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioDataset {
    pub config: DatasetConfig,
    pub scenarios: Vec<Scenario>,
}

impl ScenarioDataset {
    /// First `n_train` maps for training, the rest for testing.
    pub fn split(&self, n_train: usize) -> (Vec<Scenario>, Vec<Scenario>) {
        let k = n_train.min(self.scenarios.len());
        (self.scenarios[..k].to_vec(), self.scenarios[k..].to_vec())
    }

    pub fn inputs(&self) -> Result<Vec<GraphInput>, LabError> {
        self.scenarios
            .iter()
            .map(|s| s.input(self.config.tile_size))
            .collect()
    }
}

/// Distinct free starts and distinct free goals, no robot starting on its
/// own goal, with constraints derived from shortest paths.
pub fn sample_tasks(
    map: &GridMap,
    robots: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<AgentTask>, Vec<Path>), LabError> {
    let free = map.free_cells();
    if robots == 0 || robots > free.len() || (robots == free.len() && robots == 1) {
        return Err(LabError::GenerationFailed(format!(
            "{robots} robots on {} free cells",
            free.len()
        )));
    }
    let starts: Vec<usize> = sample(rng, free.len(), robots).into_vec();
    let goals = loop {
        let g = sample(rng, free.len(), robots).into_vec();
        if g.iter().zip(&starts).all(|(a, b)| a != b) {
            break g;
        }
    };
    let none = EdgePenalties::new();
    let mut tasks = Vec::with_capacity(robots);
    let mut plans = Vec::with_capacity(robots);
    for (i, (&s, &g)) in starts.iter().zip(&goals).enumerate() {
        let plan = astar(map, free[s], free[g], &none)?;
        tasks.push(AgentTask {
            id: i as u32,
            start: free[s],
            goal: free[g],
            time_constraint: time_constraint(&plan),
        });
        plans.push(plan);
    }
    Ok((tasks, plans))
}

pub fn time_constraint(plan: &Path) -> u32 {
    (TIME_CONSTRAINT_RATIO * f64::from(plan.arrival_time())).round() as u32
}

/// Seed of map `index` within a dataset.
pub fn map_seed(seed: u64, index: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng.gen()
}

pub fn generate_scenario(cfg: &DatasetConfig, index: usize) -> Result<Scenario, LabError> {
    let id = map_seed(cfg.seed, index);
    let map = generate_warehouse_map(&cfg.map_params(id))?;
    let mut rng = ChaCha8Rng::seed_from_u64(id);
    rng.set_stream(0xdead_beef);
    let sim = SimConfig {
        noise_wait_prob: cfg.label_noise,
        rng_seed: id,
        ..SimConfig::default()
    };
    for _ in 0..TASK_ATTEMPTS {
        let (tasks, plans) = sample_tasks(&map, cfg.robots, &mut rng)?;
        match run(&map, &tasks, &plans, &sim) {
            Ok(trace) => {
                return Ok(Scenario {
                    map_id: id,
                    map: save_map(&map),
                    tasks,
                    plans,
                    plan_index_times: trace.plan_index_times,
                    arrivals: trace.arrivals,
                })
            }
            Err(SimError::Timeout { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(LabError::GenerationFailed(format!(
        "map {id}: simulation timed out for {TASK_ATTEMPTS} task sets"
    )))
}

pub fn gen_dataset(cfg: &DatasetConfig) -> Result<ScenarioDataset, LabError> {
    let scenarios = (0..cfg.n_maps)
        .map(|i| generate_scenario(cfg, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ScenarioDataset {
        config: *cfg,
        scenarios,
    })
}
