//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::sync::Arc;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cameta::gridworld::{Cell, GridMap, Occupancy};
use cameta::hetgraph::{build_static_layer, HetGraph};
use cameta::nn::{loss, loss_and_grad, GraphInput, Mode, ModelConfig, ModelParams};
use cameta::planners::Path;
use cameta::simulator::{AgentTask, Conflict, ConflictKind};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn step_in_bounds(rng: &mut ChaCha8Rng, c: Cell, w: usize, h: usize) -> Cell {
    let mut options = vec![c];
    if c.x > 0 {
        options.push(Cell::new(c.x - 1, c.y));
    }
    if c.x + 1 < w {
        options.push(Cell::new(c.x + 1, c.y));
    }
    if c.y > 0 {
        options.push(Cell::new(c.x, c.y - 1));
    }
    if c.y + 1 < h {
        options.push(Cell::new(c.x, c.y + 1));
    }
    *options.choose(rng).expect("stay is always an option")
}

/// Random walks on an open `w x h` grid with random start times; every path
/// ends by timestep `horizon - 1`.
pub fn random_walks(rng: &mut ChaCha8Rng, agents: usize, w: usize, h: usize, horizon: u32) -> Vec<Path> {
    (0..agents)
        .map(|_| {
            let start_time = rng.gen_range(0..horizon.min(5));
            let len = rng.gen_range(1..=(horizon - start_time) as usize);
            let mut c = Cell::new(rng.gen_range(0..w), rng.gen_range(0..h));
            let mut cells = vec![c];
            for _ in 1..len {
                c = step_in_bounds(rng, c, w, h);
                cells.push(c);
            }
            Path::new(cells, start_time)
        })
        .collect()
}

/// Conflicts found by checking every pair of agents and every subset of
/// moving agents at every timestep.
pub fn brute_conflicts(paths: &[Path]) -> Vec<Conflict> {
    let mut out = Vec::new();
    if paths.is_empty() {
        return out;
    }
    let n = paths.len();
    let t0 = paths.iter().map(|p| p.start_time).min().unwrap();
    let t1 = paths.iter().map(|p| p.arrival_time()).max().unwrap();
    for t in t0..=t1 {
        let pos: Vec<Cell> = paths.iter().map(|p| p.position_at(t)).collect();
        for a in 0..n {
            for b in a + 1..n {
                if pos[a] == pos[b] {
                    out.push(Conflict { time: t, kind: ConflictKind::Vertex, agents: vec![a, b], cells: vec![pos[a]] });
                }
            }
        }
        if t == t0 {
            continue;
        }
        let from: Vec<Cell> = paths.iter().map(|p| p.position_at(t - 1)).collect();
        let moving = |i: usize| from[i] != pos[i];
        for a in 0..n {
            for b in a + 1..n {
                if !moving(a) || !moving(b) {
                    continue;
                }
                if from[a] == from[b] && pos[a] == pos[b] {
                    out.push(Conflict {
                        time: t,
                        kind: ConflictKind::Edge,
                        agents: vec![a, b],
                        cells: vec![from[a], pos[a]],
                    });
                }
                if from[a] == pos[b] && from[b] == pos[a] {
                    out.push(Conflict {
                        time: t,
                        kind: ConflictKind::Swapping,
                        agents: vec![a, b],
                        cells: vec![from[a], pos[a]],
                    });
                }
            }
        }
        // A subset rotates when its from-cells are distinct and following
        // "moves onto the cell of" from each member visits all of them once.
        for mask in 0u32..(1 << n) {
            let members: Vec<usize> = (0..n).filter(|&i| mask >> i & 1 == 1).collect();
            if members.len() < 3 || !members.iter().all(|&i| moving(i)) {
                continue;
            }
            let distinct = members
                .iter()
                .all(|&i| members.iter().filter(|&&j| from[j] == from[i]).count() == 1);
            if !distinct {
                continue;
            }
            let succ = |i: usize| members.iter().copied().find(|&j| from[j] == pos[i]);
            let mut order = vec![members[0]];
            let mut cur = members[0];
            let mut closed = false;
            while let Some(next) = succ(cur) {
                if next == members[0] {
                    closed = true;
                    break;
                }
                if order.contains(&next) {
                    break;
                }
                order.push(next);
                cur = next;
            }
            if closed && order.len() == members.len() {
                let cells = order.iter().map(|&i| from[i]).collect();
                out.push(Conflict { time: t, kind: ConflictKind::Cycle, agents: order, cells });
            }
        }
    }
    out.sort();
    out
}

pub fn random_map(rng: &mut ChaCha8Rng, w: usize, h: usize, p_block: f64) -> GridMap {
    let occ = (0..w * h)
        .map(|_| if rng.gen_bool(p_block) { Occupancy::Occupied } else { Occupancy::Free })
        .collect();
    GridMap::new(w, h, occ).expect("dimensions match")
}

/// Tasks with distinct starts and distinct goals drawn from the free cells.
pub fn random_tasks(rng: &mut ChaCha8Rng, map: &GridMap, n: usize) -> Option<Vec<AgentTask>> {
    let free = map.free_cells();
    if free.len() < n {
        return None;
    }
    let starts: Vec<Cell> = free.choose_multiple(rng, n).copied().collect();
    let goals: Vec<Cell> = free.choose_multiple(rng, n).copied().collect();
    Some(
        (0..n)
            .map(|i| AgentTask {
                id: i as u32,
                start: starts[i],
                goal: goals[i],
                time_constraint: 100,
            })
            .collect(),
    )
}

fn joint_step_ok(from: &[Cell], to: &[Cell]) -> bool {
    let n = from.len();
    for a in 0..n {
        for b in a + 1..n {
            if to[a] == to[b] {
                return false;
            }
            if from[a] != to[a] && from[a] == to[b] && from[b] == to[a] {
                return false;
            }
        }
    }
    for s in 0..n {
        let mut cur = s;
        for len in 1..=n {
            if from[cur] == to[cur] {
                break;
            }
            match (0..n).find(|&j| from[j] == to[cur]) {
                Some(j) if j == s => {
                    if len >= 3 {
                        return false;
                    }
                    break;
                }
                Some(j) => cur = j,
                None => break,
            }
        }
    }
    true
}

/// Minimum sum of arrival times over joint states. An agent standing on its
/// goal may retire there for good; each timestep costs one per active agent.
/// `None` when the goal configuration is unreachable.
pub fn joint_optimal_soc(map: &GridMap, tasks: &[AgentTask]) -> Option<u64> {
    let n = tasks.len();
    let all = (1u32 << n) - 1;
    let start: Vec<Cell> = tasks.iter().map(|t| t.start).collect();
    let mut dist: HashMap<(Vec<Cell>, u32), u64> = HashMap::new();
    let mut heap = BinaryHeap::new();
    dist.insert((start.clone(), 0), 0);
    heap.push(Reverse((0u64, start, 0u32)));
    while let Some(Reverse((d, pos, done))) = heap.pop() {
        if dist.get(&(pos.clone(), done)).is_some_and(|&best| best < d) {
            continue;
        }
        if done == all {
            return Some(d);
        }
        let mut relax = |pos: Vec<Cell>, done: u32, nd: u64, heap: &mut BinaryHeap<_>| {
            let key = (pos, done);
            if dist.get(&key).map_or(true, |&best| nd < best) {
                dist.insert(key.clone(), nd);
                heap.push(Reverse((nd, key.0, key.1)));
            }
        };
        for i in 0..n {
            if done >> i & 1 == 0 && pos[i] == tasks[i].goal {
                relax(pos.clone(), done | 1 << i, d, &mut heap);
            }
        }
        let options: Vec<Vec<Cell>> = (0..n)
            .map(|i| {
                let mut o = vec![pos[i]];
                if done >> i & 1 == 0 {
                    o.extend(map.adjacent_free(pos[i]));
                }
                o
            })
            .collect();
        let active = u64::from(n as u32 - done.count_ones());
        let mut idx = vec![0usize; n];
        loop {
            let to: Vec<Cell> = (0..n).map(|i| options[i][idx[i]]).collect();
            if joint_step_ok(&pos, &to) {
                relax(to, done, d + active, &mut heap);
            }
            let mut k = 0;
            while k < n {
                idx[k] += 1;
                if idx[k] < options[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
        }
    }
    None
}

/// Decoder weights drawn away from zero so the model departs from the naive
/// baseline.
pub fn randomized_params(cfg: ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed);
    let mut r = rng(seed ^ 0x5eed);
    let lay = p.layout();
    for b in [lay.dec_w, lay.dec_b] {
        p.blocks[b].mapv_inplace(|_| r.gen_range(-0.05..0.05));
    }
    p
}

/// Three robots on a 6x2 strip tiled 2x2: three floor nodes, six nodes in
/// all, timestamps 0..=2. Labels are naive arrivals plus the given delays.
pub fn small_input(delays: [[u32; 6]; 3]) -> GraphInput {
    let m = GridMap::empty(6, 2).unwrap();
    let layer = Arc::new(build_static_layer(&m, 2).unwrap());
    let c = Cell::new;
    let plans = [
        Path::new(vec![c(0, 0), c(1, 0), c(2, 0), c(3, 0), c(4, 0), c(5, 0)], 0),
        Path::new(vec![c(5, 1), c(4, 1), c(3, 1), c(2, 1), c(1, 1), c(0, 1)], 0),
        Path::new(vec![c(2, 1), c(2, 0), c(3, 0), c(4, 0), c(5, 0), c(5, 1)], 0),
    ];
    let tasks = [
        AgentTask { id: 0, start: c(0, 0), goal: c(5, 0), time_constraint: 8 },
        AgentTask { id: 1, start: c(5, 1), goal: c(0, 1), time_constraint: 9 },
        AgentTask { id: 2, start: c(2, 1), goal: c(5, 1), time_constraint: 6 },
    ];
    let mut g = HetGraph::build(layer, &plans, &tasks, 0).unwrap();
    let times: Vec<Vec<u32>> = delays
        .iter()
        .map(|d| {
            let mut acc = 0;
            (0..6u32)
                .map(|k| {
                    acc = acc.max(d[k as usize]);
                    k + acc
                })
                .collect()
        })
        .collect();
    g.attach_labels(&times).unwrap();
    GraphInput::from_hetgraph(&g)
}

/// Per block, `||fd - analytic|| / max(||fd||, ||analytic||)` using central
/// differences with step `eps`. With `sample = Some((k, seed))` only `k`
/// random entries per block are compared.
pub fn gradient_errors(
    params: &ModelParams,
    input: &GraphInput,
    mode: Mode,
    eps: f64,
    sample: Option<(usize, u64)>,
) -> Vec<f64> {
    let (_, grads) = loss_and_grad(params, input, mode).unwrap();
    let mut r = rng(sample.map_or(0, |s| s.1));
    grads
        .iter()
        .enumerate()
        .map(|(b, g)| {
            let all: Vec<usize> = (0..g.len()).collect();
            let entries: Vec<usize> = match sample {
                Some((k, _)) if k < g.len() => all.choose_multiple(&mut r, k).copied().collect(),
                _ => all,
            };
            let (mut diff, mut na, mut nf) = (0.0, 0.0, 0.0);
            for k in entries {
                let (row, col) = (k / g.ncols(), k % g.ncols());
                let eval = |delta: f64| {
                    let mut q = params.clone();
                    q.blocks[b][[row, col]] += delta;
                    loss(&q, input, mode).unwrap()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let an = g[[row, col]];
                diff += (fd - an) * (fd - an);
                na += an * an;
                nf += fd * fd;
            }
            diff.sqrt() / na.sqrt().max(nf.sqrt()).max(1e-8)
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Selection by full recomputation: cost is
/// `sum_i (max(TC) - (TC_i - eta_i))^2` and a candidate is valid when every
/// eta meets its constraint. Lowest cost, then lowest index.
pub fn exhaustive_select(candidates: &[Vec<f64>], tc: &[f64]) -> Option<usize> {
    let max_tc = tc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best: Option<(f64, usize)> = None;
    for (i, etas) in candidates.iter().enumerate() {
        if etas.iter().zip(tc).any(|(e, c)| e > c) {
            continue;
        }
        let mut cost = 0.0;
        for (e, c) in etas.iter().zip(tc) {
            let slack = max_tc - (c - e);
            cost += slack * slack;
        }
        if best.map_or(true, |(b, _)| cost < b) {
            best = Some((cost, i));
        }
    }
    best.map(|(_, i)| i)
}
