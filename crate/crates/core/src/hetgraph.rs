//! Spatio-temporal heterogeneous graph.
//!
//! The static layer tiles the map into `N x N` patches. Every connected free
//! region inside a tile becomes a *floor* node (several regions of one tile
//! are stacked as separate nodes); *association* edges link floor nodes whose
//! regions touch, plus a self-loop per node. The dynamic layer adds one
//! *robot* node per agent and *eta* edges from each robot to the floor nodes
//! along its plan, in traversal order.

use std::collections::{BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gridworld::{Cell, GridMap};
use crate::planners::Path;
use crate::simulator::AgentTask;

pub const DEFAULT_TILE_SIZE: usize = 5;
pub const DEFAULT_ID_MODULUS: u32 = 10_000;
/// Divisor applied to time-valued features before encoding.
pub const DEFAULT_TIME_SCALE: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HetGraphError {
    #[error("tile size {tile} invalid for a {width}x{height} map")]
    InvalidTileSize {
        tile: usize,
        width: usize,
        height: usize,
    },
    #[error("agent id {id} does not fit modulus {modulus}")]
    IdOverflow { id: u32, modulus: u32 },
    #[error("plan cell {0} is not covered by any floor node")]
    UnmappedCell(Cell),
    #[error("{0}")]
    Mismatch(String),
}

/// `round(t_current + t_path - t_constraint) + agent_id / modulus`.
/// Larger values are more urgent.
pub fn priority(
    t_current: f64,
    t_path: f64,
    t_constraint: f64,
    agent_id: u32,
    modulus: u32,
) -> Result<f64, HetGraphError> {
    if agent_id >= modulus {
        return Err(HetGraphError::IdOverflow {
            id: agent_id,
            modulus,
        });
    }
    Ok((t_current + t_path - t_constraint).round() + f64::from(agent_id) / f64::from(modulus))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorNode {
    pub id: usize,
    pub tile: (usize, usize),
    /// Index of this free region among the regions of its tile.
    pub component: usize,
    /// Row-major `N x N` patch; 0 for cells of this region, 1 otherwise
    /// (occupied, outside the map, or another region of the tile).
    pub patch: Vec<f64>,
    pub cells: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticLayer {
    pub tile_size: usize,
    pub width: usize,
    pub height: usize,
    pub floors: Vec<FloorNode>,
    /// Directed association edges, both directions and self-loops, sorted.
    pub assoc: Vec<(usize, usize)>,
    cell_floor: Vec<Option<usize>>,
}

impl StaticLayer {
    pub fn floor_of(&self, c: Cell) -> Option<usize> {
        if c.x >= self.width || c.y >= self.height {
            return None;
        }
        self.cell_floor[c.y * self.width + c.x]
    }

    pub fn patch_len(&self) -> usize {
        self.tile_size * self.tile_size
    }
}

pub fn build_static_layer(map: &GridMap, tile_size: usize) -> Result<StaticLayer, HetGraphError> {
    let (w, h) = (map.width(), map.height());
    if tile_size < 2 || tile_size > w.min(h) {
        return Err(HetGraphError::InvalidTileSize {
            tile: tile_size,
            width: w,
            height: h,
        });
    }
    let tiles_x = w.div_ceil(tile_size);
    let tiles_y = h.div_ceil(tile_size);
    let mut cell_floor = vec![None; w * h];
    let mut floors = Vec::new();

    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let x0 = tx * tile_size;
            let y0 = ty * tile_size;
            let in_tile = |c: Cell| {
                c.x >= x0 && c.x < x0 + tile_size && c.y >= y0 && c.y < y0 + tile_size
            };
            let mut component = 0;
            for y in y0..(y0 + tile_size).min(h) {
                for x in x0..(x0 + tile_size).min(w) {
                    let seed = Cell::new(x, y);
                    if !map.is_free(seed) || cell_floor[map.index(seed)].is_some() {
                        continue;
                    }
                    let id = floors.len();
                    let mut cells = Vec::new();
                    let mut queue = VecDeque::from([seed]);
                    cell_floor[map.index(seed)] = Some(id);
                    while let Some(c) = queue.pop_front() {
                        cells.push(c);
                        for nb in map.adjacent_free(c) {
                            let j = map.index(nb);
                            if in_tile(nb) && cell_floor[j].is_none() {
                                cell_floor[j] = Some(id);
                                queue.push_back(nb);
                            }
                        }
                    }
                    cells.sort();
                    let mut patch = vec![1.0; tile_size * tile_size];
                    for c in &cells {
                        patch[(c.y - y0) * tile_size + (c.x - x0)] = 0.0;
                    }
                    floors.push(FloorNode {
                        id,
                        tile: (tx, ty),
                        component,
                        patch,
                        cells,
                    });
                    component += 1;
                }
            }
        }
    }

    let mut assoc = BTreeSet::new();
    for f in &floors {
        assoc.insert((f.id, f.id));
    }
    for i in 0..w * h {
        let Some(a) = cell_floor[i] else { continue };
        let c = map.cell(i);
        for nb in map.adjacent_free(c) {
            if let Some(b) = cell_floor[map.index(nb)] {
                if a != b {
                    assoc.insert((a, b));
                    assoc.insert((b, a));
                }
            }
        }
    }

    Ok(StaticLayer {
        tile_size,
        width: w,
        height: h,
        floors,
        assoc: assoc.into_iter().collect(),
        cell_floor,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotNode {
    pub agent_id: u32,
    pub priority: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaEdge {
    /// Index into the robot nodes.
    pub robot: usize,
    /// Index into the floor nodes.
    pub floor: usize,
    /// Plan cells spent inside the floor node.
    pub naive_duration: u32,
    /// Timestep the last of those cells is reached when following the plan.
    pub naive_arrival: u32,
    /// Ordinal of this edge along the robot's plan.
    pub timestamp: u32,
    /// Plan index of the last cell of the run.
    pub plan_index: usize,
    /// Realized arrival from simulation.
    pub label: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeType {
    Floor,
    Robot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeType {
    Association,
    Eta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HetGraph {
    pub static_layer: Arc<StaticLayer>,
    pub robots: Vec<RobotNode>,
    pub eta: Vec<EtaEdge>,
    pub t_current: u32,
    pub t_max: u32,
}

/// Robot nodes and eta edges for `plans`. Consecutive plan cells in one
/// floor node form one eta edge; revisiting a node after leaving it starts a
/// new edge.
pub fn build_dynamic_layer(
    layer: &StaticLayer,
    plans: &[Path],
    tasks: &[AgentTask],
    t_current: u32,
) -> Result<(Vec<RobotNode>, Vec<EtaEdge>), HetGraphError> {
    if plans.len() != tasks.len() {
        return Err(HetGraphError::Mismatch(format!(
            "{} plans for {} tasks",
            plans.len(),
            tasks.len()
        )));
    }
    let mut robots = Vec::with_capacity(plans.len());
    let mut eta = Vec::new();
    for (r, (plan, task)) in plans.iter().zip(tasks).enumerate() {
        let t_path = plan.arrival_time().saturating_sub(t_current);
        robots.push(RobotNode {
            agent_id: task.id,
            priority: priority(
                f64::from(t_current),
                f64::from(t_path),
                f64::from(task.time_constraint),
                task.id,
                DEFAULT_ID_MODULUS,
            )?,
        });
        let mut timestamp = 0;
        let mut k = 0;
        while k < plan.len() {
            let floor = layer
                .floor_of(plan.cells[k])
                .ok_or(HetGraphError::UnmappedCell(plan.cells[k]))?;
            let mut end = k;
            while end + 1 < plan.len() && layer.floor_of(plan.cells[end + 1]) == Some(floor) {
                end += 1;
            }
            eta.push(EtaEdge {
                robot: r,
                floor,
                naive_duration: (end - k + 1) as u32,
                naive_arrival: plan.start_time + end as u32,
                timestamp,
                plan_index: end,
                label: None,
            });
            timestamp += 1;
            k = end + 1;
        }
    }
    Ok((robots, eta))
}

impl HetGraph {
    pub fn build(
        layer: Arc<StaticLayer>,
        plans: &[Path],
        tasks: &[AgentTask],
        t_current: u32,
    ) -> Result<Self, HetGraphError> {
        let (robots, eta) = build_dynamic_layer(&layer, plans, tasks, t_current)?;
        let t_max = eta.iter().map(|e| e.timestamp).max().unwrap_or(0);
        Ok(HetGraph {
            static_layer: layer,
            robots,
            eta,
            t_current,
            t_max,
        })
    }

    pub fn num_floor(&self) -> usize {
        self.static_layer.floors.len()
    }

    pub fn num_robot(&self) -> usize {
        self.robots.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_floor() + self.num_robot()
    }

    /// Floor nodes come first, then robot nodes.
    pub fn node_type(&self, node: usize) -> NodeType {
        if node < self.num_floor() {
            NodeType::Floor
        } else {
            NodeType::Robot
        }
    }

    pub fn robot_node(&self, robot: usize) -> usize {
        self.num_floor() + robot
    }

    /// Labels eta edges from per-agent plan-index reach times.
    pub fn attach_labels(&mut self, plan_index_times: &[Vec<u32>]) -> Result<(), HetGraphError> {
        if plan_index_times.len() != self.robots.len() {
            return Err(HetGraphError::Mismatch(format!(
                "{} label rows for {} robots",
                plan_index_times.len(),
                self.robots.len()
            )));
        }
        for e in &mut self.eta {
            let row = &plan_index_times[e.robot];
            let t = *row.get(e.plan_index).ok_or_else(|| {
                HetGraphError::Mismatch(format!("label row of robot {} too short", e.robot))
            })?;
            e.label = Some(t);
        }
        Ok(())
    }

    /// Index of the final eta edge of each robot.
    pub fn last_edges(&self) -> Vec<usize> {
        let mut last = vec![usize::MAX; self.robots.len()];
        for (i, e) in self.eta.iter().enumerate() {
            if last[e.robot] == usize::MAX || self.eta[last[e.robot]].timestamp < e.timestamp {
                last[e.robot] = i;
            }
        }
        last
    }

    pub fn dump(&self) -> GraphDump {
        let mut nodes = Vec::with_capacity(self.num_nodes());
        for f in &self.static_layer.floors {
            nodes.push(DumpNode {
                id: f.id,
                node_type: NodeType::Floor,
                features: f.patch.clone(),
            });
        }
        for (r, robot) in self.robots.iter().enumerate() {
            nodes.push(DumpNode {
                id: self.robot_node(r),
                node_type: NodeType::Robot,
                features: vec![robot.priority],
            });
        }
        let mut edges = Vec::new();
        for &(a, b) in &self.static_layer.assoc {
            edges.push(DumpEdge {
                src: a,
                dst: b,
                edge_type: EdgeType::Association,
                features: Vec::new(),
                label: None,
            });
        }
        for e in &self.eta {
            edges.push(DumpEdge {
                src: self.robot_node(e.robot),
                dst: e.floor,
                edge_type: EdgeType::Eta,
                features: vec![
                    f64::from(e.naive_duration),
                    f64::from(e.naive_arrival),
                    f64::from(e.timestamp),
                ],
                label: e.label,
            });
        }
        GraphDump {
            t_current: self.t_current,
            t_max: self.t_max,
            nodes,
            edges,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpNode {
    pub id: usize,
    pub node_type: NodeType,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpEdge {
    pub src: usize,
    pub dst: usize,
    pub edge_type: EdgeType,
    pub features: Vec<f64>,
    pub label: Option<u32>,
}

/// Node and edge tables for debugging and golden files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDump {
    pub t_current: u32,
    pub t_max: u32,
    pub nodes: Vec<DumpNode>,
    pub edges: Vec<DumpEdge>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(x: usize, y: usize) -> Cell {
        Cell::new(x, y)
    }

    fn task(id: u32, start: Cell, goal: Cell, tc: u32) -> AgentTask {
        AgentTask {
            id,
            start,
            goal,
            time_constraint: tc,
        }
    }

    #[test]
    fn empty_map_tiles() {
        let m = GridMap::empty(8, 8).unwrap();
        let s = build_static_layer(&m, 4).unwrap();
        assert_eq!(s.floors.len(), 4);
        let selfs = s.assoc.iter().filter(|(a, b)| a == b).count();
        assert_eq!(selfs, 4);
        assert_eq!(s.assoc.len() - selfs, 8);
    }

    #[test]
    fn wall_splits_tile_into_stacked_nodes() {
        let m = GridMap::from_rows(&[".#..", ".#..", ".#..", ".#.."]).unwrap();
        let s = build_static_layer(&m, 4).unwrap();
        assert_eq!(s.floors.len(), 2);
        assert_eq!(s.floors[0].tile, s.floors[1].tile);
        assert_eq!((s.floors[0].component, s.floors[1].component), (0, 1));
        assert_eq!(s.assoc, vec![(0, 0), (1, 1)]);
        assert_ne!(s.floors[0].patch, s.floors[1].patch);
    }

    #[test]
    fn occupied_tile_is_dropped() {
        let m = GridMap::from_rows(&["..##", "..##", "....", "...."]).unwrap();
        let s = build_static_layer(&m, 2).unwrap();
        assert_eq!(s.floors.len(), 3);
        assert!(s.floors.iter().all(|f| f.tile != (1, 0)));
    }

    #[test]
    fn padded_tiles_mark_outside_as_occupied() {
        let m = GridMap::empty(5, 5).unwrap();
        let s = build_static_layer(&m, 4).unwrap();
        assert_eq!(s.floors.len(), 4);
        let corner = s.floors.iter().find(|f| f.tile == (1, 1)).unwrap();
        assert_eq!(corner.cells, vec![c(4, 4)]);
        assert_eq!(corner.patch.iter().filter(|&&v| v == 0.0).count(), 1);
    }

    #[test]
    fn invalid_tile_size() {
        let m = GridMap::empty(4, 4).unwrap();
        assert!(build_static_layer(&m, 1).is_err());
        assert!(build_static_layer(&m, 5).is_err());
    }

    #[test]
    fn priority_rule() {
        let p = priority(0.0, 10.0, 15.0, 7, 10_000).unwrap();
        assert!((p - (-4.9993)).abs() < 1e-12);
        let a = priority(0.0, 10.0, 15.0, 3, 10_000).unwrap();
        let b = priority(0.0, 10.0, 15.0, 4, 10_000).unwrap();
        assert!(((b - a) - 1e-4).abs() < 1e-12);
        assert_eq!(
            priority(0.0, 1.0, 1.0, 10_000, 10_000),
            Err(HetGraphError::IdOverflow {
                id: 10_000,
                modulus: 10_000
            })
        );
    }

    #[test]
    fn run_length_grouping() {
        // Tiles of width 2 along one row: cells 0,1 | 2,3 | 4,5.
        let m = GridMap::empty(6, 2).unwrap();
        let s = Arc::new(build_static_layer(&m, 2).unwrap());
        let plan = Path::new(vec![c(0, 0), c(1, 0), c(1, 1), c(2, 1), c(3, 1), c(4, 1)], 0);
        let g = HetGraph::build(s, &[plan], &[task(0, c(0, 0), c(4, 1), 10)], 0).unwrap();
        let summary: Vec<_> = g
            .eta
            .iter()
            .map(|e| (e.floor, e.naive_duration, e.timestamp, e.naive_arrival))
            .collect();
        assert_eq!(summary, vec![(0, 3, 0, 2), (1, 2, 1, 4), (2, 1, 2, 5)]);
        assert_eq!(g.t_max, 2);
    }

    #[test]
    fn single_node_plan() {
        let m = GridMap::empty(4, 4).unwrap();
        let s = Arc::new(build_static_layer(&m, 4).unwrap());
        let plan = Path::new(vec![c(0, 0), c(1, 0), c(2, 0)], 3);
        let g = HetGraph::build(s, &[plan], &[task(0, c(0, 0), c(2, 0), 10)], 3).unwrap();
        assert_eq!(g.eta.len(), 1);
        assert_eq!(g.eta[0].naive_arrival, 3 + 3 - 1);
    }

    #[test]
    fn revisits_create_new_edges() {
        let m = GridMap::empty(4, 2).unwrap();
        let s = Arc::new(build_static_layer(&m, 2).unwrap());
        let plan = Path::new(vec![c(1, 0), c(2, 0), c(2, 1), c(1, 1)], 0);
        let g = HetGraph::build(s, &[plan], &[task(0, c(1, 0), c(1, 1), 10)], 0).unwrap();
        let seq: Vec<_> = g.eta.iter().map(|e| (e.floor, e.timestamp)).collect();
        assert_eq!(seq, vec![(0, 0), (1, 1), (0, 2)]);
    }

    #[test]
    fn robot_priorities_come_from_plans() {
        let m = GridMap::empty(4, 4).unwrap();
        let s = Arc::new(build_static_layer(&m, 2).unwrap());
        let plan = Path::new(vec![c(0, 0), c(1, 0), c(2, 0)], 0);
        let g = HetGraph::build(s, &[plan], &[task(7, c(0, 0), c(2, 0), 5)], 0).unwrap();
        assert!((g.robots[0].priority - (-3.0 + 0.0007)).abs() < 1e-12);
    }

    #[test]
    fn labels_and_dump() {
        let m = GridMap::empty(4, 2).unwrap();
        let s = Arc::new(build_static_layer(&m, 2).unwrap());
        let plan = Path::new(vec![c(0, 0), c(1, 0), c(2, 0), c(3, 0)], 0);
        let mut g = HetGraph::build(s, &[plan], &[task(0, c(0, 0), c(3, 0), 10)], 0).unwrap();
        g.attach_labels(&[vec![0, 2, 3, 5]]).unwrap();
        assert_eq!(g.eta[0].label, Some(2));
        assert_eq!(g.eta[1].label, Some(5));
        let dump = g.dump();
        assert_eq!(dump.nodes.len(), 3);
        assert_eq!(dump.edges.len(), 4 + 2);
        let json = serde_json::to_string(&dump).unwrap();
        let back: GraphDump = serde_json::from_str(&json).unwrap();
        assert_eq!(back, dump);
    }
}
