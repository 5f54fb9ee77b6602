//! Single-agent planning: distance fields, A* with multiplicative edge
//! penalties, and diversified route suggestions.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Cell, GridMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("goal {0} is occupied or out of bounds")]
    OccupiedGoal(Cell),
    #[error("start {0} is occupied or out of bounds")]
    OccupiedStart(Cell),
    #[error("no path from {start} to {goal}")]
    NoPath { start: Cell, goal: Cell },
    #[error("route count must be at least 1")]
    ZeroRoutes,
}

/// A timed cell sequence: `cells[k]` is occupied at `start_time + k`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Path {
    pub cells: Vec<Cell>,
    pub start_time: u32,
}

impl Path {
    pub fn new(cells: Vec<Cell>, start_time: u32) -> Self {
        assert!(!cells.is_empty(), "a path has at least one cell");
        Path { cells, start_time }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn start(&self) -> Cell {
        self.cells[0]
    }

    pub fn goal(&self) -> Cell {
        *self.cells.last().expect("non-empty path")
    }

    /// Timestep at which the last cell is reached.
    pub fn arrival_time(&self) -> u32 {
        self.start_time + self.cells.len() as u32 - 1
    }

    /// Position at `t`; before the start the agent sits on the first cell and
    /// after arrival it rests on the last.
    pub fn position_at(&self, t: u32) -> Cell {
        if t <= self.start_time {
            return self.cells[0];
        }
        let k = (t - self.start_time) as usize;
        self.cells[k.min(self.cells.len() - 1)]
    }

    /// Every consecutive pair is identical or 4-adjacent and every cell is free.
    pub fn is_valid_on(&self, map: &GridMap) -> bool {
        !self.cells.is_empty()
            && self.cells.iter().all(|&c| map.is_free(c))
            && self
                .cells
                .windows(2)
                .all(|w| w[0].is_adjacent_or_same(w[1]))
    }
}

/// Distance-to-goal over free 4-adjacency; `f64::INFINITY` for occupied or
/// unreachable cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CostField {
    width: usize,
    goal: Cell,
    dist: Vec<f64>,
}

impl CostField {
    pub fn get(&self, c: Cell) -> f64 {
        self.dist[c.y * self.width + c.x]
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn is_reachable(&self, c: Cell) -> bool {
        self.get(c).is_finite()
    }
}

/// Exact shortest distances to `goal`. Unit step costs make this a
/// breadth-first sweep.
pub fn dijkstra_field(map: &GridMap, goal: Cell) -> Result<CostField, PlanError> {
    if !map.is_free(goal) {
        return Err(PlanError::OccupiedGoal(goal));
    }
    let mut dist = vec![f64::INFINITY; map.num_cells()];
    dist[map.index(goal)] = 0.0;
    let mut queue = VecDeque::from([goal]);
    while let Some(c) = queue.pop_front() {
        let d = dist[map.index(c)];
        for n in map.adjacent_free(c) {
            let j = map.index(n);
            if dist[j].is_infinite() {
                dist[j] = d + 1.0;
                queue.push_back(n);
            }
        }
    }
    Ok(CostField {
        width: map.width(),
        goal,
        dist,
    })
}

/// Sparse multiplicative factors on directed moves; absent moves cost 1.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EdgePenalties {
    factors: BTreeMap<(Cell, Cell), f64>,
}

impl EdgePenalties {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn factor(&self, from: Cell, to: Cell) -> f64 {
        self.factors.get(&(from, to)).copied().unwrap_or(1.0)
    }

    pub fn set(&mut self, from: Cell, to: Cell, factor: f64) {
        assert!(factor >= 1.0, "penalty factors are at least 1");
        self.factors.insert((from, to), factor);
    }

    pub fn scale(&mut self, from: Cell, to: Cell, by: f64) {
        let f = self.factor(from, to) * by;
        self.set(from, to, f);
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }
}

/// Cost of following `path` under `penalties`, excluding waits.
pub fn path_cost(path: &Path, penalties: &EdgePenalties) -> f64 {
    path.cells
        .windows(2)
        .filter(|w| w[0] != w[1])
        .map(|w| penalties.factor(w[0], w[1]))
        .sum()
}

#[derive(Debug, Clone, Copy)]
struct OpenEntry {
    f: f64,
    seq: u64,
    cell: Cell,
}

impl PartialEq for OpenEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OpenEntry {}

impl Ord for OpenEntry {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.seq.cmp(&self.seq))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}
impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimal-cost path under unit steps scaled by `penalties`, guided by the
/// Manhattan heuristic. Ties go to the entry discovered first, i.e. by the
/// fixed neighbor order, then the smaller cell.
pub fn astar(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    penalties: &EdgePenalties,
) -> Result<Path, PlanError> {
    if !map.is_free(start) {
        return Err(PlanError::OccupiedStart(start));
    }
    if !map.is_free(goal) {
        return Err(PlanError::OccupiedGoal(goal));
    }
    let n = map.num_cells();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    let mut seq = 0u64;
    g[map.index(start)] = 0.0;
    open.push(OpenEntry {
        f: start.manhattan(goal) as f64,
        seq,
        cell: start,
    });
    while let Some(OpenEntry { cell, .. }) = open.pop() {
        let ci = map.index(cell);
        if closed[ci] {
            continue;
        }
        closed[ci] = true;
        if cell == goal {
            let mut cells = vec![goal];
            let mut i = ci;
            while parent[i] != usize::MAX {
                i = parent[i];
                cells.push(map.cell(i));
            }
            cells.reverse();
            return Ok(Path::new(cells, 0));
        }
        for nb in map.adjacent_free(cell) {
            let ni = map.index(nb);
            if closed[ni] {
                continue;
            }
            let cand = g[ci] + penalties.factor(cell, nb);
            if cand < g[ni] {
                g[ni] = cand;
                parent[ni] = ci;
                seq += 1;
                open.push(OpenEntry {
                    f: cand + nb.manhattan(goal) as f64,
                    seq,
                    cell: nb,
                });
            }
        }
    }
    Err(PlanError::NoPath { start, goal })
}

pub const DEFAULT_PENALTY_FACTOR: f64 = 1.2;

/// Up to `k` distinct routes. After each A* call every directed edge used by
/// any route found so far has its factor multiplied by `penalty_factor`.
/// Routes are sorted by cell count, then by discovery order.
pub fn suggest_routes(
    map: &GridMap,
    start: Cell,
    goal: Cell,
    k: usize,
    penalty_factor: f64,
) -> Result<Vec<Path>, PlanError> {
    if k == 0 {
        return Err(PlanError::ZeroRoutes);
    }
    let mut penalties = EdgePenalties::new();
    let mut routes: Vec<Path> = vec![astar(map, start, goal, &penalties)?];
    // Duplicates are common while penalties build up, so allow extra rounds.
    let max_rounds = 3 * k;
    for _ in 1..max_rounds {
        if routes.len() == k {
            break;
        }
        // Each distinct edge is scaled once per round.
        let used: Vec<(Cell, Cell)> = routes
            .iter()
            .flat_map(|r| r.cells.windows(2).map(|w| (w[0], w[1])))
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for (a, b) in used {
            penalties.scale(a, b, penalty_factor);
        }
        let next = astar(map, start, goal, &penalties)?;
        if !routes.contains(&next) {
            routes.push(next);
        }
    }
    let mut indexed: Vec<(usize, Path)> = routes.into_iter().enumerate().collect();
    indexed.sort_by_key(|(i, p)| (p.len(), *i));
    Ok(indexed.into_iter().map(|(_, p)| p).collect())
}
