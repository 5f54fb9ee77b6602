//! Reference multi-agent planners: optimal Conflict-Based Search for small
//! instances and the real-time PIBT rule.
//!
//! Both plan for perfect execution with agents resting at their goals.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::gridworld::{Cell, GridMap};
use crate::planners::{dijkstra_field, CostField, Path};
use crate::simulator::{detect_conflicts, AgentTask, Conflict, ConflictKind, ExecutionTrace};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("instance has no conflict-free solution")]
    Unsolvable,
    #[error("search expanded {0} nodes without a solution")]
    BudgetExceeded(usize),
    #[error("agents {stuck:?} unfinished after {max_timesteps} timesteps")]
    Timeout { stuck: Vec<u32>, max_timesteps: u32 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// Conflict-free paths sharing one start time.
#[derive(Debug, Clone, PartialEq)]
pub struct JointPlan {
    pub paths: Vec<Path>,
}

impl JointPlan {
    /// Sum of arrival times.
    pub fn soc(&self) -> u64 {
        self.paths.iter().map(|p| u64::from(p.arrival_time())).sum()
    }

    pub fn makespan(&self) -> u32 {
        self.paths.iter().map(|p| p.arrival_time()).max().unwrap_or(0)
    }
}

pub const CBS_MAX_AGENTS: usize = 6;
pub const CBS_MAX_SIDE: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CbsConfig {
    pub max_agents: usize,
    /// Largest allowed map width and height.
    pub max_side: usize,
    /// High-level nodes generated before giving up.
    pub max_nodes: usize,
    /// Joint-state reachability is checked up front when the joint state
    /// space is at most this large.
    pub joint_check_limit: usize,
}

impl Default for CbsConfig {
    fn default() -> Self {
        CbsConfig {
            max_agents: CBS_MAX_AGENTS,
            max_side: CBS_MAX_SIDE,
            max_nodes: 200_000,
            joint_check_limit: 200_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Constraint {
    /// The agent may not occupy the cell at the timestep.
    Vertex(Cell, u32),
    /// The agent may not traverse `from -> to` arriving at the timestep.
    Move(Cell, Cell, u32),
}

#[derive(Debug, Default, Clone)]
struct ConstraintSet {
    vertex: HashSet<(Cell, u32)>,
    moves: HashSet<(Cell, Cell, u32)>,
    max_time: u32,
}

impl ConstraintSet {
    fn from_list(list: &[Constraint]) -> Self {
        let mut set = ConstraintSet::default();
        for &c in list {
            match c {
                Constraint::Vertex(cell, t) => {
                    set.vertex.insert((cell, t));
                    set.max_time = set.max_time.max(t);
                }
                Constraint::Move(a, b, t) => {
                    set.moves.insert((a, b, t));
                    set.max_time = set.max_time.max(t);
                }
            }
        }
        set
    }

    fn allows(&self, from: Cell, to: Cell, t: u32) -> bool {
        !self.vertex.contains(&(to, t)) && !self.moves.contains(&(from, to, t))
    }

    /// Last timestep at which the goal itself is forbidden, if any.
    fn last_goal_block(&self, goal: Cell) -> Option<u32> {
        self.vertex
            .iter()
            .filter(|(c, _)| *c == goal)
            .map(|&(_, t)| t)
            .max()
    }
}

/// Space-time A* for one agent that rests at its goal after arriving.
fn low_level(
    map: &GridMap,
    field: &CostField,
    start: Cell,
    goal: Cell,
    constraints: &ConstraintSet,
) -> Option<Path> {
    let horizon = constraints.max_time + map.free_count() as u32 + 1;
    let goal_block = constraints.last_goal_block(goal);
    let mut open = BinaryHeap::new();
    let mut parent: HashMap<(Cell, u32), (Cell, u32)> = HashMap::new();
    let mut seen: HashSet<(Cell, u32)> = HashSet::new();
    let mut seq = 0u64;
    let h = |c: Cell| field.get(c) as u32;
    open.push(Reverse((h(start), Reverse(0u32), seq, start)));
    seen.insert((start, 0));
    while let Some(Reverse((_, Reverse(t), _, cell))) = open.pop() {
        if cell == goal && goal_block.map_or(true, |b| t > b) {
            let mut cells = vec![cell];
            let mut key = (cell, t);
            while let Some(&prev) = parent.get(&key) {
                cells.push(prev.0);
                key = prev;
            }
            cells.reverse();
            return Some(Path::new(cells, 0));
        }
        if t >= horizon {
            continue;
        }
        let nt = t + 1;
        for next in map.adjacent_free(cell).chain(std::iter::once(cell)) {
            if !field.is_reachable(next) || !constraints.allows(cell, next, nt) {
                continue;
            }
            if seen.insert((next, nt)) {
                parent.insert((next, nt), (cell, t));
                seq += 1;
                open.push(Reverse((nt + h(next), Reverse(nt), seq, next)));
            }
        }
    }
    None
}

struct CbsNode {
    soc: u64,
    id: usize,
    constraints: Vec<Vec<Constraint>>,
    paths: Vec<Path>,
}

impl PartialEq for CbsNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for CbsNode {}

impl Ord for CbsNode {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.soc, other.id).cmp(&(self.soc, self.id))
    }
}

impl PartialOrd for CbsNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Branches resolving `conflict`: each is an (agent, constraint) pair.
fn branches(conflict: &Conflict, paths: &[Path]) -> Vec<(usize, Constraint)> {
    let t = conflict.time;
    let step = |a: usize| (paths[a].position_at(t - 1), paths[a].position_at(t));
    match conflict.kind {
        ConflictKind::Vertex => conflict
            .agents
            .iter()
            .map(|&a| (a, Constraint::Vertex(conflict.cells[0], t)))
            .collect(),
        ConflictKind::Edge | ConflictKind::Swapping | ConflictKind::Cycle => conflict
            .agents
            .iter()
            .map(|&a| {
                let (from, to) = step(a);
                (a, Constraint::Move(from, to, t))
            })
            .collect(),
    }
}

fn check_tasks(map: &GridMap, tasks: &[AgentTask]) -> Result<(), BaselineError> {
    let bad = |m: String| Err(BaselineError::InvalidInput(m));
    let mut starts = HashSet::new();
    let mut goals = HashSet::new();
    for t in tasks {
        if !map.is_free(t.start) || !map.is_free(t.goal) {
            return bad(format!("agent {} has an occupied endpoint", t.id));
        }
        if !starts.insert(t.start) {
            return bad(format!("start {} shared", t.start));
        }
        if !goals.insert(t.goal) {
            return bad(format!("goal {} shared", t.goal));
        }
    }
    Ok(())
}

/// Sum-of-costs optimal conflict-free plan.
pub fn cbs(map: &GridMap, tasks: &[AgentTask]) -> Result<JointPlan, BaselineError> {
    cbs_with(map, tasks, &CbsConfig::default())
}

pub fn cbs_with(
    map: &GridMap,
    tasks: &[AgentTask],
    cfg: &CbsConfig,
) -> Result<JointPlan, BaselineError> {
    if tasks.len() > cfg.max_agents || map.width() > cfg.max_side || map.height() > cfg.max_side {
        return Err(BaselineError::InvalidInput(format!(
            "{} agents on {}x{} exceeds {} agents on {}x{}",
            tasks.len(),
            map.width(),
            map.height(),
            cfg.max_agents,
            cfg.max_side,
            cfg.max_side
        )));
    }
    check_tasks(map, tasks)?;
    let n = tasks.len();
    let fields = tasks
        .iter()
        .map(|t| dijkstra_field(map, t.goal))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| BaselineError::InvalidInput(e.to_string()))?;
    if tasks.iter().zip(&fields).any(|(t, f)| !f.is_reachable(t.start)) {
        return Err(BaselineError::Unsolvable);
    }
    let states = (map.free_count() as f64).powi(n as i32);
    if states <= cfg.joint_check_limit as f64 && !jointly_reachable(map, tasks) {
        return Err(BaselineError::Unsolvable);
    }

    let empty = ConstraintSet::default();
    let mut paths = Vec::with_capacity(n);
    for (t, f) in tasks.iter().zip(&fields) {
        paths.push(low_level(map, f, t.start, t.goal, &empty).ok_or(BaselineError::Unsolvable)?);
    }
    let soc_of = |p: &[Path]| p.iter().map(|q| u64::from(q.arrival_time())).sum::<u64>();
    let mut open = BinaryHeap::new();
    open.push(CbsNode {
        soc: soc_of(&paths),
        id: 0,
        constraints: vec![Vec::new(); n],
        paths,
    });
    let mut generated = 1usize;
    while let Some(node) = open.pop() {
        let Some(conflict) = detect_conflicts(&node.paths).into_iter().next() else {
            return Ok(JointPlan { paths: node.paths });
        };
        for (agent, constraint) in branches(&conflict, &node.paths) {
            if generated >= cfg.max_nodes {
                return Err(BaselineError::BudgetExceeded(generated));
            }
            let mut constraints = node.constraints.clone();
            constraints[agent].push(constraint);
            let set = ConstraintSet::from_list(&constraints[agent]);
            let task = &tasks[agent];
            let Some(path) = low_level(map, &fields[agent], task.start, task.goal, &set) else {
                continue;
            };
            let mut paths = node.paths.clone();
            paths[agent] = path;
            open.push(CbsNode {
                soc: soc_of(&paths),
                id: generated,
                constraints,
                paths,
            });
            generated += 1;
        }
    }
    Err(BaselineError::Unsolvable)
}

/// Whether one joint step `from -> to` is free of vertex, swapping and
/// rotation conflicts. Moving onto a cell vacated in the same step is allowed.
pub fn joint_step_is_valid(from: &[Cell], to: &[Cell]) -> bool {
    let n = from.len();
    for i in 0..n {
        for j in i + 1..n {
            if to[i] == to[j] {
                return false;
            }
        }
    }
    let occupant: HashMap<Cell, usize> = from.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    for s in 0..n {
        // Follow s into the cell it enters; a chain back to s is a swap or
        // rotation.
        let mut cur = s;
        for _ in 0..n {
            if from[cur] == to[cur] {
                break;
            }
            match occupant.get(&to[cur]) {
                Some(&next) if next == s => return false,
                Some(&next) => cur = next,
                None => break,
            }
        }
    }
    true
}

/// Breadth-first reachability of the goal configuration over joint states.
fn jointly_reachable(map: &GridMap, tasks: &[AgentTask]) -> bool {
    let start: Vec<Cell> = tasks.iter().map(|t| t.start).collect();
    let goal: Vec<Cell> = tasks.iter().map(|t| t.goal).collect();
    let mut seen = HashSet::from([start.clone()]);
    let mut queue = VecDeque::from([start]);
    while let Some(state) = queue.pop_front() {
        if state == goal {
            return true;
        }
        for next in joint_successors(map, &state) {
            if seen.insert(next.clone()) {
                queue.push_back(next);
            }
        }
    }
    false
}

/// Every valid joint successor of `state`.
pub fn joint_successors(map: &GridMap, state: &[Cell]) -> Vec<Vec<Cell>> {
    let options: Vec<Vec<Cell>> = state
        .iter()
        .map(|&c| std::iter::once(c).chain(map.adjacent_free(c)).collect())
        .collect();
    let mut out = Vec::new();
    let mut choice = vec![0usize; state.len()];
    loop {
        let next: Vec<Cell> = choice.iter().zip(&options).map(|(&k, o)| o[k]).collect();
        if joint_step_is_valid(state, &next) {
            out.push(next);
        }
        let mut i = 0;
        loop {
            if i == state.len() {
                return out;
            }
            choice[i] += 1;
            if choice[i] < options[i].len() {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

/// Priority Inheritance with Backtracking. Returns the realized joint motion
/// until every agent rests on its goal.
pub fn pibt(
    map: &GridMap,
    tasks: &[AgentTask],
    max_timesteps: u32,
) -> Result<ExecutionTrace, BaselineError> {
    check_tasks(map, tasks)?;
    let n = tasks.len();
    let fields = tasks
        .iter()
        .map(|t| dijkstra_field(map, t.goal))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| BaselineError::InvalidInput(e.to_string()))?;
    if tasks.iter().zip(&fields).any(|(t, f)| !f.is_reachable(t.start)) {
        return Err(BaselineError::Unsolvable);
    }

    // Unique fractional offsets break ties by agent id.
    let mut order_ids: Vec<usize> = (0..n).collect();
    order_ids.sort_by_key(|&i| tasks[i].id);
    let mut eps = vec![0.0; n];
    for (rank, &i) in order_ids.iter().enumerate() {
        eps[i] = (n - rank) as f64 / (n + 1) as f64;
    }
    let mut prio = eps.clone();
    let mut pos: Vec<Cell> = tasks.iter().map(|t| t.start).collect();
    let mut trajectories: Vec<Vec<Cell>> = pos.iter().map(|&c| vec![c]).collect();
    let mut arrivals: Vec<u32> = (0..n).map(|i| if pos[i] == tasks[i].goal { 0 } else { u32::MAX }).collect();

    let mut t = 0u32;
    while (0..n).any(|i| pos[i] != tasks[i].goal) {
        if t >= max_timesteps {
            return Err(BaselineError::Timeout {
                stuck: (0..n).filter(|&i| pos[i] != tasks[i].goal).map(|i| tasks[i].id).collect(),
                max_timesteps,
            });
        }
        for i in 0..n {
            if pos[i] == tasks[i].goal {
                prio[i] = eps[i];
            } else {
                prio[i] += 1.0;
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| prio[b].total_cmp(&prio[a]));
        let mut step = PibtStep {
            map,
            fields: &fields,
            pos: &pos,
            occupant: pos.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
            next: vec![None; n],
        };
        for &i in &order {
            if step.next[i].is_none() {
                step.decide(i, None);
            }
        }
        let next: Vec<Cell> = step.next.iter().map(|c| c.expect("every agent decided")).collect();
        t += 1;
        for i in 0..n {
            pos[i] = next[i];
            trajectories[i].push(next[i]);
            if next[i] == tasks[i].goal {
                if arrivals[i] == u32::MAX || trajectories[i][t as usize - 1] != tasks[i].goal {
                    arrivals[i] = t;
                }
            }
        }
    }
    Ok(ExecutionTrace {
        trajectories,
        arrivals,
        plan_index_times: Vec::new(),
        naive_arrivals: tasks
            .iter()
            .zip(&fields)
            .map(|(task, f)| f.get(task.start) as u32)
            .collect(),
        resolved_conflict_count: 0,
        forced_waits: 0,
        completed: true,
    })
}

struct PibtStep<'a> {
    map: &'a GridMap,
    fields: &'a [CostField],
    pos: &'a [Cell],
    occupant: HashMap<Cell, usize>,
    next: Vec<Option<Cell>>,
}

impl PibtStep<'_> {
    fn reserved(&self, c: Cell) -> bool {
        self.next.iter().any(|&n| n == Some(c))
    }

    /// Whether `agent` entering `target` would close a rotation through
    /// agents whose moves are already fixed.
    fn closes_cycle(&self, agent: usize, target: Cell) -> bool {
        let mut cell = target;
        for _ in 0..self.pos.len() {
            let Some(&k) = self.occupant.get(&cell) else {
                return false;
            };
            match self.next[k] {
                Some(to) if to != cell => {
                    if to == self.pos[agent] {
                        return true;
                    }
                    cell = to;
                }
                _ => return false,
            }
        }
        false
    }

    fn decide(&mut self, agent: usize, parent: Option<usize>) -> bool {
        let here = self.pos[agent];
        let field = &self.fields[agent];
        let mut candidates: Vec<Cell> = self.map.adjacent_free(here).collect();
        candidates.push(here);
        candidates.sort_by(|&a, &b| {
            let occ = |c: Cell| self.occupant.get(&c).is_some_and(|&k| k != agent);
            field
                .get(a)
                .total_cmp(&field.get(b))
                .then(occ(a).cmp(&occ(b)))
        });
        for v in candidates {
            if self.reserved(v) {
                continue;
            }
            if parent.is_some_and(|p| self.pos[p] == v) {
                continue;
            }
            if v != here && self.closes_cycle(agent, v) {
                continue;
            }
            self.next[agent] = Some(v);
            if let Some(&k) = self.occupant.get(&v) {
                if k != agent && self.next[k].is_none() && !self.decide(k, Some(agent)) {
                    continue;
                }
            }
            return true;
        }
        self.next[agent] = Some(here);
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: usize, y: usize) -> Cell {
        Cell::new(x, y)
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
    fn cbs_disjoint_corridors() {
        let m = GridMap::from_rows(&["......", "######", "......"]).unwrap();
        let tasks = [task(0, c(0, 0), c(5, 0)), task(1, c(5, 2), c(1, 2))];
        let plan = cbs(&m, &tasks).unwrap();
        assert_eq!(plan.soc(), 5 + 4);
        assert!(detect_conflicts(&plan.paths).is_empty());
    }

    #[test]
    fn cbs_swap_on_two_cells_is_unsolvable() {
        let m = GridMap::from_rows(&["..", "##"]).unwrap();
        let tasks = [task(0, c(0, 0), c(1, 0)), task(1, c(1, 0), c(0, 0))];
        assert_eq!(cbs(&m, &tasks), Err(BaselineError::Unsolvable));
    }

    #[test]
    fn cbs_uses_pocket() {
        let m = GridMap::from_rows(&["##.##", ".....", "#####"]).unwrap();
        let tasks = [task(0, c(0, 1), c(4, 1)), task(1, c(4, 1), c(0, 1))];
        let plan = cbs(&m, &tasks).unwrap();
        assert!(detect_conflicts(&plan.paths).is_empty());
        // The pocket user loses two steps and the other agent waits once.
        assert_eq!(plan.soc(), 4 + 4 + 3);
    }

    #[test]
    fn cbs_resolves_rotation() {
        // Four agents on a 2x2 block want to rotate; rotation is forbidden,
        // so someone must step outside the block.
        let m = GridMap::empty(3, 3).unwrap();
        let tasks = [
            task(0, c(0, 0), c(1, 0)),
            task(1, c(1, 0), c(1, 1)),
            task(2, c(1, 1), c(0, 1)),
            task(3, c(0, 1), c(0, 0)),
        ];
        let plan = cbs(&m, &tasks).unwrap();
        assert!(detect_conflicts(&plan.paths).is_empty());
        assert!(plan.soc() > 4);
    }

    #[test]
    fn cbs_rejects_large_instances() {
        let m = GridMap::empty(13, 13).unwrap();
        let tasks = [task(0, c(0, 0), c(1, 0))];
        assert!(matches!(cbs(&m, &tasks), Err(BaselineError::InvalidInput(_))));
        let lifted = CbsConfig { max_side: 13, ..CbsConfig::default() };
        assert_eq!(cbs_with(&m, &tasks, &lifted).unwrap().soc(), 1);
    }

    #[test]
    fn cbs_budget() {
        let m = GridMap::from_rows(&["##.##", ".....", "#####"]).unwrap();
        let tasks = [task(0, c(0, 1), c(4, 1)), task(1, c(4, 1), c(0, 1))];
        let cfg = CbsConfig {
            max_nodes: 1,
            joint_check_limit: 0,
            ..CbsConfig::default()
        };
        assert_eq!(cbs_with(&m, &tasks, &cfg), Err(BaselineError::BudgetExceeded(1)));
    }

    #[test]
    fn joint_step_rules() {
        let a = [c(0, 0), c(1, 0)];
        assert!(!joint_step_is_valid(&a, &[c(1, 0), c(0, 0)]));
        assert!(joint_step_is_valid(&a, &[c(1, 0), c(2, 0)]));
        assert!(!joint_step_is_valid(&a, &[c(1, 0), c(1, 0)]));
        let ring = [c(0, 0), c(1, 0), c(1, 1), c(0, 1)];
        let rotated = [c(1, 0), c(1, 1), c(0, 1), c(0, 0)];
        assert!(!joint_step_is_valid(&ring, &rotated));
    }

    #[test]
    fn pibt_single_agent() {
        let m = GridMap::empty(6, 6).unwrap();
        let trace = pibt(&m, &[task(0, c(0, 0), c(4, 3))], 100).unwrap();
        assert_eq!(trace.arrivals, vec![7]);
    }

    #[test]
    fn pibt_junction_yields() {
        let m = GridMap::from_rows(&["#.#", "...", "#.#"]).unwrap();
        let tasks = [task(0, c(0, 1), c(2, 1)), task(1, c(1, 0), c(1, 2))];
        let trace = pibt(&m, &tasks, 50).unwrap();
        assert!(detect_conflicts(&trace.realized_paths()).is_empty());
        assert!(trace.arrivals.iter().any(|&a| a > 2));
    }

    #[test]
    fn pibt_timeout() {
        let m = GridMap::from_rows(&["..", "##"]).unwrap();
        let tasks = [task(0, c(0, 0), c(1, 0)), task(1, c(1, 0), c(0, 0))];
        assert!(matches!(pibt(&m, &tasks, 10), Err(BaselineError::Timeout { .. })));
    }
}
