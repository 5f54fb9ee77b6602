//! Discrete-timestep multi-agent execution.
//!
//! Agents follow their plans under forced-wait noise. Every timestep the
//! next `whca_window` moves of all agents are checked against a space-time
//! reservation table built in descending priority order; agents whose
//! intended moves collide replan inside the window. Realized trajectories
//! are free of vertex, edge, swapping and cycle conflicts.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Cell, GridMap};
use crate::hetgraph::{priority, DEFAULT_ID_MODULUS};
use crate::planners::Path;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("agents {stuck:?} unfinished after {max_timesteps} timesteps")]
    Timeout { stuck: Vec<u32>, max_timesteps: u32 },
    #[error("trace is incomplete")]
    IncompleteTrace,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentTask {
    pub id: u32,
    pub start: Cell,
    pub goal: Cell,
    /// Latest allowed arrival timestep.
    pub time_constraint: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Per agent, per timestep probability of a forced wait.
    pub noise_wait_prob: f64,
    pub rng_seed: u64,
    pub whca_window: usize,
    pub max_timesteps: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            noise_wait_prob: 0.0,
            rng_seed: 0,
            whca_window: 5,
            max_timesteps: 1000,
        }
    }
}

/// Noise levels swept in the planner comparison, as probabilities.
pub const NOISE_LEVELS: [f64; 5] = [0.0, 1e-7, 1e-6, 1e-5, 1e-4];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConflictKind {
    Vertex,
    Edge,
    Swapping,
    Cycle,
}

/// A forbidden movement pattern. Move conflicts are stamped with the arrival
/// timestep of the offending moves.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Conflict {
    pub time: u32,
    pub kind: ConflictKind,
    /// Agent indices, ascending for pairwise kinds; cycle order starting at
    /// the smallest index for cycles.
    pub agents: Vec<usize>,
    pub cells: Vec<Cell>,
}

/// Enumerates every vertex, edge, swapping and cycle conflict among
/// time-aligned paths, ordered by (time, kind, smallest agent).
pub fn detect_conflicts(paths: &[Path]) -> Vec<Conflict> {
    if paths.is_empty() {
        return Vec::new();
    }
    let t0 = paths.iter().map(|p| p.start_time).min().unwrap_or(0);
    let t1 = paths.iter().map(|p| p.arrival_time()).max().unwrap_or(0);
    let mut out = Vec::new();
    let mut prev: Vec<Cell> = paths.iter().map(|p| p.position_at(t0)).collect();
    vertex_conflicts(t0, &prev, &mut out);
    for t in t0 + 1..=t1 {
        let cur: Vec<Cell> = paths.iter().map(|p| p.position_at(t)).collect();
        vertex_conflicts(t, &cur, &mut out);
        move_conflicts(t, &prev, &cur, &mut out);
        prev = cur;
    }
    out.sort_by(|a, b| {
        (a.time, a.kind, a.agents.iter().min())
            .cmp(&(b.time, b.kind, b.agents.iter().min()))
            .then_with(|| a.cmp(b))
    });
    out
}

fn vertex_conflicts(t: u32, pos: &[Cell], out: &mut Vec<Conflict>) {
    let mut by_cell: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for (i, &c) in pos.iter().enumerate() {
        by_cell.entry(c).or_default().push(i);
    }
    for (cell, agents) in by_cell {
        for (k, &a) in agents.iter().enumerate() {
            for &b in &agents[k + 1..] {
                out.push(Conflict {
                    time: t,
                    kind: ConflictKind::Vertex,
                    agents: vec![a, b],
                    cells: vec![cell],
                });
            }
        }
    }
}

fn move_conflicts(t: u32, from: &[Cell], to: &[Cell], out: &mut Vec<Conflict>) {
    let n = from.len();
    let moving: Vec<usize> = (0..n).filter(|&i| from[i] != to[i]).collect();

    let mut by_edge: BTreeMap<(Cell, Cell), Vec<usize>> = BTreeMap::new();
    for &i in &moving {
        by_edge.entry((from[i], to[i])).or_default().push(i);
    }
    for (&(u, v), agents) in &by_edge {
        for (k, &a) in agents.iter().enumerate() {
            for &b in &agents[k + 1..] {
                out.push(Conflict {
                    time: t,
                    kind: ConflictKind::Edge,
                    agents: vec![a, b],
                    cells: vec![u, v],
                });
            }
        }
        if u < v {
            if let Some(rev) = by_edge.get(&(v, u)) {
                for &a in agents {
                    for &b in rev {
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        out.push(Conflict {
                            time: t,
                            kind: ConflictKind::Swapping,
                            agents: vec![lo, hi],
                            cells: vec![from[lo], to[lo]],
                        });
                    }
                }
            }
        }
    }

    // Cycles of length >= 3: agent a "follows into" b when a moves onto the
    // cell b is leaving.
    let mut leaving: BTreeMap<Cell, Vec<usize>> = BTreeMap::new();
    for &i in &moving {
        leaving.entry(from[i]).or_default().push(i);
    }
    let succ: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            if from[i] == to[i] {
                Vec::new()
            } else {
                leaving.get(&to[i]).cloned().unwrap_or_default()
            }
        })
        .collect();
    let mut stack = Vec::new();
    for &s in &moving {
        stack.clear();
        stack.push(s);
        find_cycles(s, s, &succ, from, &mut stack, t, out);
    }
}

fn find_cycles(
    start: usize,
    node: usize,
    succ: &[Vec<usize>],
    from: &[Cell],
    stack: &mut Vec<usize>,
    t: u32,
    out: &mut Vec<Conflict>,
) {
    for &next in &succ[node] {
        if next == start {
            if stack.len() >= 3 {
                let mut cells: Vec<Cell> = stack.iter().map(|&a| from[a]).collect();
                let distinct = cells.iter().collect::<BTreeSet<_>>().len() == cells.len();
                if distinct {
                    out.push(Conflict {
                        time: t,
                        kind: ConflictKind::Cycle,
                        agents: stack.clone(),
                        cells: std::mem::take(&mut cells),
                    });
                }
            }
        } else if next > start && !stack.contains(&next) {
            stack.push(next);
            find_cycles(start, next, succ, from, stack, t, out);
            stack.pop();
        }
    }
}

/// One agent's view for a repair round.
#[derive(Debug, Clone, Copy)]
pub struct WindowAgent<'a> {
    pub current: Cell,
    /// Remaining plan starting at the last plan cell reached.
    pub route: &'a [Cell],
    /// Forced to hold its cell for the whole window (noise, not started).
    pub pinned: bool,
}

impl WindowAgent<'_> {
    pub fn on_route(&self) -> bool {
        self.route.first() == Some(&self.current)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepairOutcome {
    /// Per agent, positions for window steps 0..=W (step 0 is the current cell).
    pub moves: Vec<Vec<Cell>>,
    /// Whether an agent's next move differs from its intended next move.
    pub changed: Vec<bool>,
}

#[derive(Default)]
struct Reservations {
    vertex: HashSet<(Cell, usize)>,
    moves: HashSet<(Cell, Cell, usize)>,
}

impl Reservations {
    fn allows(&self, blocked: &HashSet<Cell>, a: Cell, b: Cell, k: usize) -> bool {
        !blocked.contains(&b)
            && !self.vertex.contains(&(b, k))
            && (a == b || !self.moves.contains(&(b, a, k)))
    }

    fn admits(&self, blocked: &HashSet<Cell>, path: &[Cell]) -> bool {
        path.windows(2)
            .enumerate()
            .all(|(k, w)| self.allows(blocked, w[0], w[1], k + 1))
    }

    fn reserve(&mut self, path: &[Cell]) {
        for (k, w) in path.windows(2).enumerate() {
            self.vertex.insert((w[1], k + 1));
            if w[0] != w[1] {
                self.moves.insert((w[0], w[1], k + 1));
            }
        }
    }
}

/// Route-following moves for an on-route agent, `window + 1` positions.
pub fn intended_moves(agent: &WindowAgent<'_>, window: usize) -> Vec<Cell> {
    let last = agent.route.len() - 1;
    (0..=window).map(|k| agent.route[k.min(last)]).collect()
}

#[derive(Debug, Clone, Copy)]
struct SearchNode {
    progress_sum: usize,
    /// Sum over steps of the distance to the next-to-reach route cell.
    detour_sum: usize,
    moves: usize,
    parent: Option<(Cell, usize)>,
}

impl SearchNode {
    fn rank(&self) -> (usize, std::cmp::Reverse<usize>, std::cmp::Reverse<usize>) {
        (
            self.progress_sum,
            std::cmp::Reverse(self.detour_sum),
            std::cmp::Reverse(self.moves),
        )
    }
}

/// Space-time search over `window` steps with waits. Maximizes route
/// progress, then ends as close to the route as possible, then prefers early
/// progress, early returns to the route and fewer moves. Progress only
/// advances by stepping onto the next route cell, so an agent never gets
/// ahead of its plan.
fn window_search(
    map: &GridMap,
    agent: &WindowAgent<'_>,
    window: usize,
    res: &Reservations,
    blocked: &HashSet<Cell>,
) -> Option<Vec<Cell>> {
    let route = agent.route;
    let mut layers: Vec<BTreeMap<(Cell, usize), SearchNode>> = Vec::with_capacity(window + 1);
    let mut first = BTreeMap::new();
    first.insert(
        (agent.current, 0),
        SearchNode {
            progress_sum: 0,
            detour_sum: 0,
            moves: 0,
            parent: None,
        },
    );
    layers.push(first);
    for k in 1..=window {
        let mut next: BTreeMap<(Cell, usize), SearchNode> = BTreeMap::new();
        for (&(c, off), node) in &layers[k - 1] {
            for nb in std::iter::once(c).chain(map.adjacent_free(c)) {
                if !res.allows(blocked, c, nb, k) {
                    continue;
                }
                let noff = if off + 1 < route.len() && route[off + 1] == nb {
                    off + 1
                } else {
                    off
                };
                let cand = SearchNode {
                    progress_sum: node.progress_sum + noff,
                    detour_sum: node.detour_sum + nb.manhattan(route[noff]),
                    moves: node.moves + usize::from(nb != c),
                    parent: Some((c, off)),
                };
                match next.get_mut(&(nb, noff)) {
                    Some(e) => {
                        if cand.rank() > e.rank() {
                            *e = cand;
                        }
                    }
                    None => {
                        next.insert((nb, noff), cand);
                    }
                }
            }
        }
        if next.is_empty() {
            return None;
        }
        layers.push(next);
    }

    let score = |&(c, off): &(Cell, usize), n: &SearchNode| {
        (off, std::cmp::Reverse(c.manhattan(route[off])), n.rank())
    };
    let mut best: Option<((Cell, usize), _)> = None;
    for (key, node) in &layers[window] {
        let s = score(key, node);
        if best.as_ref().map_or(true, |(_, bs)| s > *bs) {
            best = Some((*key, s));
        }
    }
    let (mut key, _) = best?;
    let mut cells = vec![key.0];
    for k in (1..=window).rev() {
        key = layers[k][&key].parent.expect("non-root has parent");
        cells.push(key.0);
    }
    cells.reverse();
    Some(cells)
}

/// Resolves the next `window` moves of all agents by priority. Higher
/// priority agents keep their intended moves; lower ones replan around the
/// reservations or, failing that, hold position. Agents that must hold are
/// pinned and the round restarts, so the result contains none of the four
/// conflict kinds. Priorities must be pairwise distinct.
pub fn whca_local_repair(
    map: &GridMap,
    agents: &[WindowAgent<'_>],
    priorities: &[f64],
    window: usize,
) -> RepairOutcome {
    assert_eq!(agents.len(), priorities.len());
    let n = agents.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| priorities[b].total_cmp(&priorities[a]).then(a.cmp(&b)));

    let free_res = Reservations::default();
    let no_block = HashSet::new();
    let intended: Vec<Vec<Cell>> = agents
        .iter()
        .map(|a| {
            if a.pinned {
                vec![a.current; window + 1]
            } else if a.on_route() {
                intended_moves(a, window)
            } else {
                window_search(map, a, window, &free_res, &no_block)
                    .unwrap_or_else(|| vec![a.current; window + 1])
            }
        })
        .collect();

    let mut pinned: Vec<bool> = agents.iter().map(|a| a.pinned).collect();
    loop {
        let blocked: HashSet<Cell> = (0..n)
            .filter(|&i| pinned[i])
            .map(|i| agents[i].current)
            .collect();
        let mut res = Reservations::default();
        let mut moves: Vec<Vec<Cell>> = vec![Vec::new(); n];
        let mut failed = None;
        for &i in &order {
            if pinned[i] {
                moves[i] = vec![agents[i].current; window + 1];
                continue;
            }
            // Positions are distinct, so `blocked` never holds this agent's cell.
            let path = if res.admits(&blocked, &intended[i]) {
                intended[i].clone()
            } else if let Some(p) = window_search(map, &agents[i], window, &res, &blocked) {
                p
            } else {
                failed = Some(i);
                break;
            };
            res.reserve(&path);
            moves[i] = path;
        }
        if let Some(i) = failed {
            pinned[i] = true;
            continue;
        }

        let paths: Vec<Path> = moves.iter().map(|m| Path::new(m.clone(), 0)).collect();
        let conflicts = detect_conflicts(&paths);
        debug_assert!(conflicts.iter().all(|c| c.kind == ConflictKind::Cycle));
        if let Some(cycle) = conflicts.first() {
            let victim = *cycle
                .agents
                .iter()
                .filter(|&&a| !pinned[a])
                .min_by(|&&a, &&b| priorities[a].total_cmp(&priorities[b]))
                .expect("a cycle has a moving agent");
            pinned[victim] = true;
            continue;
        }

        let changed = (0..n).map(|i| moves[i][1] != intended[i][1]).collect();
        return RepairOutcome { moves, changed };
    }
}

/// Realized execution of a set of plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionTrace {
    /// Realized cell per agent per timestep, all of equal length.
    pub trajectories: Vec<Vec<Cell>>,
    /// First timestep each agent completed its plan.
    pub arrivals: Vec<u32>,
    /// Per agent, the timestep each plan index was first reached.
    pub plan_index_times: Vec<Vec<u32>>,
    pub naive_arrivals: Vec<u32>,
    pub resolved_conflict_count: usize,
    pub forced_waits: usize,
    pub completed: bool,
}

impl ExecutionTrace {
    /// A completed trace carrying only arrival times.
    pub fn from_arrivals(arrivals: Vec<u32>) -> Self {
        ExecutionTrace {
            trajectories: Vec::new(),
            naive_arrivals: arrivals.clone(),
            plan_index_times: Vec::new(),
            arrivals,
            resolved_conflict_count: 0,
            forced_waits: 0,
            completed: true,
        }
    }

    pub fn realized_paths(&self) -> Vec<Path> {
        self.trajectories
            .iter()
            .map(|t| Path::new(t.clone(), 0))
            .collect()
    }
}

pub fn makespan(trace: &ExecutionTrace) -> Result<u32, SimError> {
    if !trace.completed {
        return Err(SimError::IncompleteTrace);
    }
    Ok(trace.arrivals.iter().copied().max().unwrap_or(0))
}

pub fn soc(trace: &ExecutionTrace) -> Result<u64, SimError> {
    if !trace.completed {
        return Err(SimError::IncompleteTrace);
    }
    Ok(trace.arrivals.iter().map(|&a| u64::from(a)).sum())
}

/// Static per-run priority of each agent: lateness of its naive plan against
/// its time constraint, made unique by the agent id.
pub fn plan_priorities(tasks: &[AgentTask], plans: &[Path]) -> Vec<f64> {
    tasks
        .iter()
        .zip(plans)
        .map(|(task, plan)| {
            priority(
                0.0,
                f64::from(plan.arrival_time()),
                f64::from(task.time_constraint),
                task.id,
                DEFAULT_ID_MODULUS,
            )
            .expect("agent id below modulus")
        })
        .collect()
}

/// Offset that ranks agents resting at their goal below every moving agent.
const FINISHED_PRIORITY_OFFSET: f64 = 1.0e9;

pub fn run(
    map: &GridMap,
    tasks: &[AgentTask],
    plans: &[Path],
    cfg: &SimConfig,
) -> Result<ExecutionTrace, SimError> {
    validate(map, tasks, plans, cfg)?;
    let n = tasks.len();
    let window = cfg.whca_window;
    let base_priority = plan_priorities(tasks, plans);
    let mut rngs: Vec<ChaCha8Rng> = tasks
        .iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
            rng.set_stream(u64::from(t.id));
            rng
        })
        .collect();

    let last: Vec<usize> = plans.iter().map(|p| p.len() - 1).collect();
    let mut pos: Vec<Cell> = plans.iter().map(|p| p.cells[0]).collect();
    let mut progress = vec![0usize; n];
    let mut index_times: Vec<Vec<u32>> = plans
        .iter()
        .map(|p| {
            let mut v = vec![u32::MAX; p.len()];
            v[0] = p.start_time;
            v
        })
        .collect();
    let mut trajectories: Vec<Vec<Cell>> = pos.iter().map(|&c| vec![c]).collect();
    let mut resolved = 0usize;
    let mut forced_waits = 0usize;

    let mut t = 0u32;
    loop {
        let done = (0..n).all(|i| progress[i] == last[i] && pos[i] == plans[i].goal());
        if done {
            break;
        }
        if t >= cfg.max_timesteps {
            let stuck = (0..n)
                .filter(|&i| progress[i] != last[i])
                .map(|i| tasks[i].id)
                .collect();
            return Err(SimError::Timeout {
                stuck,
                max_timesteps: cfg.max_timesteps,
            });
        }

        let mut pinned = vec![false; n];
        for i in 0..n {
            if t < plans[i].start_time {
                pinned[i] = true;
            } else if progress[i] < last[i] {
                let u: f64 = rngs[i].gen();
                if u < cfg.noise_wait_prob {
                    pinned[i] = true;
                    forced_waits += 1;
                }
            }
        }
        let priorities: Vec<f64> = (0..n)
            .map(|i| {
                if progress[i] == last[i] {
                    base_priority[i] - FINISHED_PRIORITY_OFFSET
                } else {
                    base_priority[i]
                }
            })
            .collect();
        let agents: Vec<WindowAgent<'_>> = (0..n)
            .map(|i| WindowAgent {
                current: pos[i],
                route: &plans[i].cells[progress[i]..],
                pinned: pinned[i],
            })
            .collect();
        let outcome = whca_local_repair(map, &agents, &priorities, window);
        if outcome.changed.iter().any(|&c| c) {
            resolved += 1;
        }

        t += 1;
        for i in 0..n {
            let next = outcome.moves[i][1];
            pos[i] = next;
            trajectories[i].push(next);
            if progress[i] < last[i] && plans[i].cells[progress[i] + 1] == next {
                progress[i] += 1;
                index_times[i][progress[i]] = t;
            }
        }
    }

    let arrivals = (0..n).map(|i| index_times[i][last[i]]).collect();
    Ok(ExecutionTrace {
        trajectories,
        arrivals,
        plan_index_times: index_times,
        naive_arrivals: plans.iter().map(|p| p.arrival_time()).collect(),
        resolved_conflict_count: resolved,
        forced_waits,
        completed: true,
    })
}

fn validate(
    map: &GridMap,
    tasks: &[AgentTask],
    plans: &[Path],
    cfg: &SimConfig,
) -> Result<(), SimError> {
    let bad = |m: String| Err(SimError::InvalidInput(m));
    if tasks.len() != plans.len() {
        return bad(format!("{} tasks but {} plans", tasks.len(), plans.len()));
    }
    if !(0.0..=1.0).contains(&cfg.noise_wait_prob) {
        return bad(format!("noise probability {}", cfg.noise_wait_prob));
    }
    if cfg.whca_window == 0 {
        return bad("window must be at least one step".into());
    }
    let mut starts = BTreeSet::new();
    let mut ids = BTreeSet::new();
    for (task, plan) in tasks.iter().zip(plans) {
        if !plan.is_valid_on(map) {
            return bad(format!("plan of agent {} is not a valid path", task.id));
        }
        if plan.start() != task.start || plan.goal() != task.goal {
            return bad(format!("plan of agent {} does not match its task", task.id));
        }
        if !starts.insert(task.start) {
            return bad(format!("start {} shared by several agents", task.start));
        }
        if !ids.insert(task.id) {
            return bad(format!("duplicate agent id {}", task.id));
        }
    }
    Ok(())
}

/// JSON-exportable summary of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub config: SimConfig,
    pub agent_ids: Vec<u32>,
    pub arrivals: Vec<u32>,
    pub naive_arrivals: Vec<u32>,
    pub resolved_conflict_count: usize,
    pub forced_waits: usize,
    pub makespan: u32,
    pub soc: u64,
}

impl TraceReport {
    pub fn new(cfg: &SimConfig, tasks: &[AgentTask], trace: &ExecutionTrace) -> Result<Self, SimError> {
        Ok(TraceReport {
            config: *cfg,
            agent_ids: tasks.iter().map(|t| t.id).collect(),
            arrivals: trace.arrivals.clone(),
            naive_arrivals: trace.naive_arrivals.clone(),
            resolved_conflict_count: trace.resolved_conflict_count,
            forced_waits: trace.forced_waits,
            makespan: makespan(trace)?,
            soc: soc(trace)?,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planners::{astar, EdgePenalties};

    fn c(x: usize, y: usize) -> Cell {
        Cell::new(x, y)
    }

    fn p(cells: &[(usize, usize)]) -> Path {
        Path::new(cells.iter().map(|&(x, y)| c(x, y)).collect(), 0)
    }

    fn task(id: u32, start: Cell, goal: Cell) -> AgentTask {
        AgentTask {
            id,
            start,
            goal,
            time_constraint: 100,
        }
    }

    #[test]
    fn vertex_conflict() {
        let conflicts = detect_conflicts(&[p(&[(0, 0), (1, 0)]), p(&[(2, 0), (1, 0)])]);
        assert_eq!(conflicts.len(), 1);
        assert_eq!(conflicts[0].kind, ConflictKind::Vertex);
        assert_eq!(conflicts[0].cells, vec![c(1, 0)]);
        assert_eq!(conflicts[0].time, 1);
    }

    #[test]
    fn swapping_conflict_is_not_double_counted() {
        let conflicts = detect_conflicts(&[p(&[(0, 0), (1, 0)]), p(&[(1, 0), (0, 0)])]);
        assert_eq!(conflicts.len(), 1);
        assert_eq!(conflicts[0].kind, ConflictKind::Swapping);
        assert_eq!(conflicts[0].agents, vec![0, 1]);
    }

    #[test]
    fn rotation_is_one_cycle_conflict() {
        // Four cells of a 2x2 block, three agents rotating.
        let conflicts = detect_conflicts(&[
            p(&[(0, 0), (1, 0)]),
            p(&[(1, 0), (1, 1)]),
            p(&[(1, 1), (0, 0)]),
        ]);
        assert_eq!(conflicts.len(), 1);
        assert_eq!(conflicts[0].kind, ConflictKind::Cycle);
        assert_eq!(conflicts[0].agents, vec![0, 1, 2]);
    }

    #[test]
    fn following_and_disjoint_paths_are_fine() {
        assert!(detect_conflicts(&[p(&[(0, 0), (1, 0)]), p(&[(0, 2), (1, 2)])]).is_empty());
        assert!(detect_conflicts(&[p(&[(1, 0), (2, 0)]), p(&[(0, 0), (1, 0)])]).is_empty());
        assert!(detect_conflicts(&[]).is_empty());
    }

    #[test]
    fn edge_conflict_same_direction() {
        let conflicts = detect_conflicts(&[p(&[(0, 0), (1, 0)]), p(&[(0, 0), (1, 0)])]);
        let kinds: Vec<_> = conflicts.iter().map(|c| (c.time, c.kind)).collect();
        assert_eq!(
            kinds,
            vec![
                (0, ConflictKind::Vertex),
                (1, ConflictKind::Vertex),
                (1, ConflictKind::Edge)
            ]
        );
    }

    #[test]
    fn resting_agent_counts_as_vertex_conflict() {
        let conflicts = detect_conflicts(&[p(&[(1, 0)]), p(&[(0, 0), (1, 0), (2, 0)])]);
        assert_eq!(conflicts.len(), 1);
        assert_eq!(conflicts[0].kind, ConflictKind::Vertex);
        assert_eq!(conflicts[0].time, 1);
    }

    #[test]
    fn makespan_and_soc() {
        let t = ExecutionTrace::from_arrivals(vec![3, 5, 4]);
        assert_eq!(makespan(&t), Ok(5));
        assert_eq!(soc(&t), Ok(12));
        let t = ExecutionTrace::from_arrivals(vec![7]);
        assert_eq!((makespan(&t), soc(&t)), (Ok(7), Ok(7)));
        let t = ExecutionTrace::from_arrivals(vec![]);
        assert_eq!((makespan(&t), soc(&t)), (Ok(0), Ok(0)));
        let mut t = ExecutionTrace::from_arrivals(vec![1]);
        t.completed = false;
        assert_eq!(makespan(&t), Err(SimError::IncompleteTrace));
    }

    #[test]
    fn single_agent_noise_free_follows_plan() {
        let m = GridMap::empty(6, 6).unwrap();
        let plan = astar(&m, c(0, 0), c(5, 3), &EdgePenalties::new()).unwrap();
        let tr = run(&m, &[task(0, c(0, 0), c(5, 3))], &[plan.clone()], &SimConfig::default()).unwrap();
        assert_eq!(tr.arrivals, vec![plan.len() as u32 - 1]);
        assert_eq!(tr.trajectories[0], plan.cells);
    }

    #[test]
    fn full_noise_never_moves() {
        let m = GridMap::empty(4, 4).unwrap();
        let plan = astar(&m, c(0, 0), c(3, 3), &EdgePenalties::new()).unwrap();
        let cfg = SimConfig {
            noise_wait_prob: 1.0,
            max_timesteps: 50,
            ..SimConfig::default()
        };
        let err = run(&m, &[task(4, c(0, 0), c(3, 3))], &[plan], &cfg).unwrap_err();
        assert_eq!(
            err,
            SimError::Timeout {
                stuck: vec![4],
                max_timesteps: 50
            }
        );
    }

    fn corridor_with_pocket() -> GridMap {
        GridMap::from_rows(&["###.####", "........", "########"]).unwrap()
    }

    #[test]
    fn head_on_swap_uses_the_pocket() {
        let m = corridor_with_pocket();
        let tasks = [task(0, c(0, 1), c(7, 1)), task(1, c(7, 1), c(0, 1))];
        let plans: Vec<Path> = tasks
            .iter()
            .map(|t| astar(&m, t.start, t.goal, &EdgePenalties::new()).unwrap())
            .collect();
        let tr = run(&m, &tasks, &plans, &SimConfig::default()).unwrap();
        assert!(detect_conflicts(&tr.realized_paths()).is_empty());
        let pr = plan_priorities(&tasks, &plans);
        let low = if pr[0] < pr[1] { 0 } else { 1 };
        assert!(tr.arrivals[low] > tr.naive_arrivals[low]);
        for i in 0..2 {
            assert!(tr.arrivals[i] >= tr.naive_arrivals[i]);
        }
        assert!(tr.trajectories[low].contains(&c(3, 0)));
        assert!(tr.resolved_conflict_count > 0);
    }

    #[test]
    fn repair_without_conflicts_is_identity() {
        let m = GridMap::empty(6, 6).unwrap();
        let r0 = [c(0, 0), c(1, 0), c(2, 0), c(3, 0)];
        let r1 = [c(0, 5), c(1, 5), c(2, 5)];
        let agents = [
            WindowAgent { current: r0[0], route: &r0, pinned: false },
            WindowAgent { current: r1[0], route: &r1, pinned: false },
        ];
        let out = whca_local_repair(&m, &agents, &[1.0, 2.0], 5);
        assert_eq!(out.moves[0], intended_moves(&agents[0], 5));
        assert_eq!(out.moves[1], intended_moves(&agents[1], 5));
        assert_eq!(out.changed, vec![false, false]);
    }

    #[test]
    fn higher_priority_keeps_contested_cell() {
        let m = GridMap::empty(3, 3).unwrap();
        let r0 = [c(0, 1), c(1, 1), c(2, 1)];
        let r1 = [c(1, 0), c(1, 1), c(1, 2)];
        let agents = [
            WindowAgent { current: r0[0], route: &r0, pinned: false },
            WindowAgent { current: r1[0], route: &r1, pinned: false },
        ];
        let out = whca_local_repair(&m, &agents, &[5.0, 1.0], 3);
        assert_eq!(out.moves[0][1], c(1, 1));
        assert_ne!(out.moves[1][1], c(1, 1));
        assert!(out.changed[1] && !out.changed[0]);
        let paths: Vec<Path> = out.moves.iter().map(|m| Path::new(m.clone(), 0)).collect();
        assert!(detect_conflicts(&paths).is_empty());
    }

    #[test]
    fn window_swap_routes_through_pocket() {
        let m = corridor_with_pocket();
        let r0: Vec<Cell> = (0..8).map(|x| c(x, 1)).collect();
        let r1: Vec<Cell> = (0..=4).rev().map(|x| c(x, 1)).collect();
        let agents = [
            WindowAgent { current: r0[0], route: &r0, pinned: false },
            WindowAgent { current: r1[0], route: &r1, pinned: false },
        ];
        let out = whca_local_repair(&m, &agents, &[2.0, 1.0], 5);
        assert_eq!(out.moves[0], intended_moves(&agents[0], 5));
        assert!(out.moves[1].contains(&c(3, 0)));
        let paths: Vec<Path> = out.moves.iter().map(|m| Path::new(m.clone(), 0)).collect();
        assert!(detect_conflicts(&paths).is_empty());
    }

    #[test]
    fn trace_report_serializes() {
        let m = GridMap::empty(4, 4).unwrap();
        let tasks = [task(0, c(0, 0), c(3, 0))];
        let plans = [astar(&m, c(0, 0), c(3, 0), &EdgePenalties::new()).unwrap()];
        let cfg = SimConfig::default();
        let tr = run(&m, &tasks, &plans, &cfg).unwrap();
        let json = TraceReport::new(&cfg, &tasks, &tr).unwrap().to_json();
        let back: TraceReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.makespan, 3);
        assert_eq!(back.soc, 3);
    }
}
