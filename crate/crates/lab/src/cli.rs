//! Command-line interface. Every command writes into `--out`: a `config.json`
//! echo of its settings plus CSV/JSON results, each CSV row tagged with the
//! hash of that config.

use std::fs;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use cameta::gridworld::{generate_warehouse_map, save_map, WarehouseGenParams};
use cameta::hetgraph::build_static_layer;
use cameta::nn::{load_checkpoint, save_checkpoint, train, Mode, ModelConfig, ModelParams, TrainConfig};
use cameta::planners::DEFAULT_PENALTY_FACTOR;
use cameta::selection::{plan_with_model, Deadline, PlannerConfig};
use cameta::simulator::{run as simulate, SimConfig, TraceReport, NOISE_LEVELS};

use crate::dataset::{gen_dataset, generate_scenario, map_seed, DatasetConfig, ScenarioDataset};
use crate::eval::evaluate;
use crate::sweep::{noise_sweep, Planner, SweepConfig};

#[derive(Debug, Parser)]
#[command(name = "cameta-lab", about = "Arrival-time model experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate warehouse maps.
    GenMaps(GenMapsArgs),
    /// Generate scenarios with simulated arrival labels.
    GenDataset(GenDatasetArgs),
    /// Train an arrival-time model.
    Train(TrainArgs),
    /// Compare naive and model predictions on a test split.
    Eval(EvalArgs),
    /// Compare planners under forced-wait noise.
    NoiseSweep(SweepArgs),
    /// Select routes for one scenario with a trained model.
    Plan(PlanArgs),
    /// Execute one scenario's naive plans in the simulator.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MapArgs {
    #[arg(long, default_value_t = 24)]
    pub width: usize,
    #[arg(long, default_value_t = 24)]
    pub height: usize,
    #[arg(long, default_value_t = 3)]
    pub shelf_row_period: usize,
    #[arg(long, default_value_t = 6)]
    pub shelf_gap_period: usize,
    #[arg(long, default_value_t = 0.1)]
    pub obstacle_jitter: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenMapsArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub map: MapArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDatasetArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 70)]
    pub n_maps: usize,
    #[arg(long, default_value_t = 15)]
    pub robots: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = cameta::hetgraph::DEFAULT_TILE_SIZE)]
    pub tile_size: usize,
    /// Forced-wait probability while labelling; zero gives noise-free labels.
    #[arg(long, default_value_t = 0.0)]
    pub label_noise: f64,
    #[command(flatten)]
    pub map: MapArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Ims,
    Dms,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Ims => Mode::Ims,
            ModeArg::Dms => Mode::Dms,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Scenarios used for training; the rest form the test split.
    #[arg(long, default_value_t = 50)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Dms)]
    pub mode: ModeArg,
    /// Seeds both the initialization and the epoch shuffles.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.75)]
    pub lr_decay: f64,
    #[arg(long, default_value_t = 8)]
    pub decay_every: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 3)]
    pub heads: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    /// Scenarios before this index are skipped as training data.
    #[arg(long, default_value_t = 50)]
    pub n_train: usize,
    /// `name=checkpoint.json`, repeatable; rows follow the given order.
    #[arg(long = "model", required = true)]
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub robots: usize,
    /// Seeds the scenario and the noise draws.
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 20)]
    pub n_seeds: usize,
    #[arg(long, value_delimiter = ',', default_values_t = NOISE_LEVELS.to_vec())]
    pub noise_levels: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec!["naive-astar".to_string(), "cameta".into(), "pibt".into(), "cbs".into()])]
    pub planners: Vec<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    pub max_timesteps: u32,
    #[arg(long, default_value_t = 4)]
    pub routes: usize,
    #[command(flatten)]
    pub map: MapArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PlanArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub scenario: usize,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub routes: usize,
    #[arg(long, default_value_t = DEFAULT_PENALTY_FACTOR)]
    pub penalty_factor: f64,
    /// Treat an arrival exactly at the deadline as late.
    #[arg(long)]
    pub exclusive_deadline: bool,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub scenario: usize,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub window: usize,
    #[arg(long, default_value_t = 1000)]
    pub max_timesteps: u32,
}

impl MapArgs {
    fn params(&self, seed: u64) -> WarehouseGenParams {
        WarehouseGenParams {
            shelf_row_period: self.shelf_row_period,
            shelf_gap_period: self.shelf_gap_period,
            obstacle_density_jitter: self.obstacle_jitter,
            ..WarehouseGenParams::new(seed, self.width, self.height)
        }
    }

    fn dataset_config(&self, n_maps: usize, robots: usize, seed: u64) -> DatasetConfig {
        DatasetConfig {
            shelf_row_period: self.shelf_row_period,
            shelf_gap_period: self.shelf_gap_period,
            obstacle_jitter: self.obstacle_jitter,
            ..DatasetConfig::new(n_maps, self.width, self.height, robots, seed)
        }
    }
}

/// First 16 hex digits of the SHA-256 of the config's JSON.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct RunDir {
    dir: PathBuf,
    hash: String,
}

impl RunDir {
    fn create<T: Serialize>(dir: &FsPath, command: &str, config: &T) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let hash = config_hash(&(command, config));
        let echo = serde_json::json!({ "command": command, "config_hash": hash, "config": config });
        let run = RunDir {
            dir: dir.to_path_buf(),
            hash,
        };
        run.write("config.json", &serde_json::to_string_pretty(&echo)?)?;
        Ok(run)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }

    fn csv<R: Serialize>(&self, name: &str, rows: &[R]) -> Result<()> {
        let p = self.path(name);
        let mut w = csv::Writer::from_path(&p).with_context(|| format!("writing {}", p.display()))?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn read_dataset(path: &FsPath) -> Result<ScenarioDataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_checkpoint(path: &FsPath) -> Result<ModelParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_checkpoint(&text).with_context(|| format!("loading {}", path.display()))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenMaps(a) => gen_maps_cmd(&a),
        Command::GenDataset(a) => gen_dataset_cmd(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::NoiseSweep(a) => sweep_cmd(&a),
        Command::Plan(a) => plan_cmd(&a),
        Command::Simulate(a) => simulate_cmd(&a),
    }
}

#[derive(Serialize)]
struct MapRow {
    config_hash: String,
    index: usize,
    map_seed: u64,
    width: usize,
    height: usize,
    free_cells: usize,
    file: String,
}

fn gen_maps_cmd(a: &GenMapsArgs) -> Result<()> {
    let run = RunDir::create(&a.out, "gen-maps", a)?;
    fs::create_dir_all(run.path("maps"))?;
    let mut rows = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let seed = map_seed(a.seed, i);
        let map = generate_warehouse_map(&a.map.params(seed))?;
        let file = format!("maps/map_{i:04}.txt");
        run.write(&file, &save_map(&map))?;
        rows.push(MapRow {
            config_hash: run.hash.clone(),
            index: i,
            map_seed: seed,
            width: map.width(),
            height: map.height(),
            free_cells: map.free_count(),
            file,
        });
    }
    run.csv("maps.csv", &rows)
}

#[derive(Serialize)]
struct ScenarioRow {
    config_hash: String,
    index: usize,
    map_id: u64,
    robots: usize,
    free_cells: usize,
    eta_edges: usize,
    naive_soc: u64,
    soc: u64,
    makespan: u32,
}

fn gen_dataset_cmd(a: &GenDatasetArgs) -> Result<()> {
    let run = RunDir::create(&a.out, "gen-dataset", a)?;
    let mut cfg = a.map.dataset_config(a.n_maps, a.robots, a.seed);
    cfg.tile_size = a.tile_size;
    cfg.label_noise = a.label_noise;
    let ds = gen_dataset(&cfg)?;
    let mut rows = Vec::with_capacity(ds.scenarios.len());
    for (i, s) in ds.scenarios.iter().enumerate() {
        rows.push(ScenarioRow {
            config_hash: run.hash.clone(),
            index: i,
            map_id: s.map_id,
            robots: s.tasks.len(),
            free_cells: s.grid()?.free_count(),
            eta_edges: s.graph(cfg.tile_size)?.eta.len(),
            naive_soc: s.plans.iter().map(|p| u64::from(p.arrival_time())).sum(),
            soc: s.arrivals.iter().map(|&t| u64::from(t)).sum(),
            makespan: s.arrivals.iter().copied().max().unwrap_or(0),
        });
    }
    run.write("dataset.json", &serde_json::to_string(&ds)?)?;
    run.csv("scenarios.csv", &rows)
}

#[derive(Serialize)]
struct EpochRow {
    config_hash: String,
    epoch: usize,
    lr: f64,
    train_mape: f64,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let run = RunDir::create(&a.out, "train", a)?;
    let ds = read_dataset(&a.dataset)?;
    let (train_set, _) = ds.split(a.n_train);
    if train_set.is_empty() {
        bail!("no training scenarios");
    }
    let data = train_set
        .iter()
        .map(|s| s.input(ds.config.tile_size))
        .collect::<Result<Vec<_>, _>>()?;
    let model_cfg = ModelConfig {
        hidden: a.hidden,
        heads: a.heads,
        floor_in: ds.config.tile_size * ds.config.tile_size,
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(model_cfg, a.seed);
    let tc = TrainConfig {
        lr: a.lr,
        lr_decay: a.lr_decay,
        decay_every: a.decay_every,
        epochs: a.epochs,
        mode: a.mode.into(),
        seed: a.seed,
        ..TrainConfig::default()
    };
    let log = train(&mut params, &data, &tc, |_, _| {})?;
    let rows: Vec<EpochRow> = log
        .iter()
        .map(|l| EpochRow {
            config_hash: run.hash.clone(),
            epoch: l.epoch,
            lr: l.lr,
            train_mape: l.train_mape,
        })
        .collect();
    run.write("checkpoint.json", &save_checkpoint(&params))?;
    run.csv("train_log.csv", &rows)
}

#[derive(Serialize)]
struct EvalCsvRow {
    config_hash: String,
    robots: usize,
    method: String,
    edges: usize,
    rmse: f64,
    mape: f64,
    mae: f64,
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let run = RunDir::create(&a.out, "eval", a)?;
    let ds = read_dataset(&a.dataset)?;
    let (_, test) = ds.split(a.n_train);
    if test.is_empty() {
        bail!("no test scenarios after index {}", a.n_train);
    }
    let data = test
        .iter()
        .map(|s| s.input(ds.config.tile_size))
        .collect::<Result<Vec<_>, _>>()?;
    let mut models = Vec::with_capacity(a.models.len());
    for spec in &a.models {
        let (name, path) = spec
            .split_once('=')
            .with_context(|| format!("model `{spec}` is not name=path"))?;
        models.push((name.to_string(), read_checkpoint(FsPath::new(path))?));
    }
    let named: Vec<(&str, &ModelParams)> = models.iter().map(|(n, p)| (n.as_str(), p)).collect();
    let rows: Vec<EvalCsvRow> = evaluate(ds.config.robots, &named, &data)?
        .into_iter()
        .map(|r| EvalCsvRow {
            config_hash: run.hash.clone(),
            robots: r.robots,
            method: r.method,
            edges: r.edges,
            rmse: r.rmse,
            mape: r.mape,
            mae: r.mae,
        })
        .collect();
    run.csv("eval.csv", &rows)
}

#[derive(Serialize)]
struct SweepRunRow {
    config_hash: String,
    planner: String,
    noise: f64,
    seed: u64,
    completed: bool,
    makespan: Option<u32>,
    soc: Option<u64>,
    forced_waits: usize,
}

#[derive(Serialize)]
struct SweepSummaryRow {
    config_hash: String,
    planner: String,
    noise: f64,
    seeds: usize,
    completed: usize,
    mean_makespan: f64,
    std_makespan: f64,
    mean_soc: f64,
    std_soc: f64,
}

#[derive(Serialize)]
struct SkippedRow {
    config_hash: String,
    planner: String,
    reason: String,
}

fn parse_planner(name: &str) -> Result<Planner> {
    Planner::ALL
        .into_iter()
        .find(|p| p.name() == name)
        .with_context(|| format!("unknown planner `{name}`"))
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let run = RunDir::create(&a.out, "noise-sweep", a)?;
    let planners = a
        .planners
        .iter()
        .map(|p| parse_planner(p))
        .collect::<Result<Vec<_>>>()?;
    let ds_cfg = a.map.dataset_config(1, a.robots, a.seed);
    let scenario = generate_scenario(&ds_cfg, 0)?;
    let map = scenario.grid()?;
    let layer = Arc::new(build_static_layer(&map, ds_cfg.tile_size)?);
    let model = a.checkpoint.as_deref().map(read_checkpoint).transpose()?;
    let mut cfg = SweepConfig::new(a.n_seeds, a.seed);
    cfg.noise_levels = a.noise_levels.clone();
    cfg.max_timesteps = a.max_timesteps;
    cfg.planner.routes = a.routes;
    let rep = noise_sweep(&map, &layer, &scenario.tasks, model.as_ref(), &planners, &cfg)?;
    let runs: Vec<SweepRunRow> = rep
        .runs
        .iter()
        .map(|r| SweepRunRow {
            config_hash: run.hash.clone(),
            planner: r.planner.to_string(),
            noise: r.noise,
            seed: r.seed,
            completed: r.completed,
            makespan: r.makespan,
            soc: r.soc,
            forced_waits: r.forced_waits,
        })
        .collect();
    let summary: Vec<SweepSummaryRow> = rep
        .summary
        .iter()
        .map(|s| SweepSummaryRow {
            config_hash: run.hash.clone(),
            planner: s.planner.to_string(),
            noise: s.noise,
            seeds: s.seeds,
            completed: s.completed,
            mean_makespan: s.mean_makespan,
            std_makespan: s.std_makespan,
            mean_soc: s.mean_soc,
            std_soc: s.std_soc,
        })
        .collect();
    let skipped: Vec<SkippedRow> = rep
        .skipped
        .iter()
        .map(|(p, why)| SkippedRow {
            config_hash: run.hash.clone(),
            planner: p.to_string(),
            reason: why.clone(),
        })
        .collect();
    run.write("scenario.json", &serde_json::to_string(&scenario)?)?;
    run.csv("sweep_runs.csv", &runs)?;
    run.csv("sweep_summary.csv", &summary)?;
    run.csv("skipped.csv", &skipped)
}

#[derive(Serialize)]
struct CandidateRow {
    config_hash: String,
    agent_id: u32,
    candidate: usize,
    cost: f64,
    valid: bool,
    chosen: bool,
    max_eta: f64,
}

#[derive(Serialize, Deserialize)]
struct PlanJson {
    agent_ids: Vec<u32>,
    paths: Vec<Vec<(usize, usize)>>,
    all_valid: bool,
}

fn plan_cmd(a: &PlanArgs) -> Result<()> {
    let run = RunDir::create(&a.out, "plan", a)?;
    let ds = read_dataset(&a.dataset)?;
    let scenario = ds
        .scenarios
        .get(a.scenario)
        .with_context(|| format!("scenario {} out of range", a.scenario))?;
    let map = scenario.grid()?;
    let layer = scenario.static_layer(ds.config.tile_size)?;
    let params = read_checkpoint(&a.checkpoint)?;
    let cfg = PlannerConfig {
        routes: a.routes,
        penalty_factor: a.penalty_factor,
        deadline: if a.exclusive_deadline {
            Deadline::Exclusive
        } else {
            Deadline::Inclusive
        },
    };
    let out = plan_with_model(&map, &layer, &scenario.tasks, &params, &cfg)?;
    let mut rows = Vec::new();
    for d in &out.decisions {
        for c in &d.candidates {
            rows.push(CandidateRow {
                config_hash: run.hash.clone(),
                agent_id: d.agent_id,
                candidate: c.candidate_index,
                cost: c.cost,
                valid: c.valid,
                chosen: c.candidate_index == d.chosen,
                max_eta: c.etas.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            });
        }
    }
    let plan = PlanJson {
        agent_ids: scenario.tasks.iter().map(|t| t.id).collect(),
        paths: out
            .paths
            .iter()
            .map(|p| p.cells.iter().map(|c| (c.x, c.y)).collect())
            .collect(),
        all_valid: out.decisions.iter().all(|d| d.valid),
    };
    run.write("plan.json", &serde_json::to_string_pretty(&plan)?)?;
    run.csv("candidates.csv", &rows)
}

#[derive(Serialize)]
struct ArrivalRow {
    config_hash: String,
    agent_id: u32,
    naive_arrival: u32,
    arrival: u32,
    time_constraint: u32,
}

fn simulate_cmd(a: &SimulateArgs) -> Result<()> {
    let run = RunDir::create(&a.out, "simulate", a)?;
    let ds = read_dataset(&a.dataset)?;
    let scenario = ds
        .scenarios
        .get(a.scenario)
        .with_context(|| format!("scenario {} out of range", a.scenario))?;
    let map = scenario.grid()?;
    let cfg = SimConfig {
        noise_wait_prob: a.noise,
        rng_seed: a.seed,
        whca_window: a.window,
        max_timesteps: a.max_timesteps,
    };
    let trace = simulate(&map, &scenario.tasks, &scenario.plans, &cfg)?;
    let rows: Vec<ArrivalRow> = scenario
        .tasks
        .iter()
        .enumerate()
        .map(|(i, t)| ArrivalRow {
            config_hash: run.hash.clone(),
            agent_id: t.id,
            naive_arrival: trace.naive_arrivals[i],
            arrival: trace.arrivals[i],
            time_constraint: t.time_constraint,
        })
        .collect();
    run.write("trace.json", &TraceReport::new(&cfg, &scenario.tasks, &trace)?.to_json())?;
    run.csv("arrivals.csv", &rows)
}
