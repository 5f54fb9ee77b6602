//! Occupancy-grid environments.
//!
//! A [`GridMap`] is a row-major grid of free/occupied cells with 4-connected
//! motion. Warehouse-style maps are produced by [`generate_warehouse_map`], a
//! pure function of its parameters.

use std::cmp::Ordering;
use std::collections::VecDeque;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("map generation failed after {attempts} repair attempts")]
    GenerationFailed { attempts: usize },
    #[error("cell {0} is out of bounds")]
    OutOfBounds(Cell),
    #[error("cell {0} is occupied")]
    OccupiedCell(Cell),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid map: {0}")]
    InvalidMap(String),
}

/// A grid coordinate. Ordered by `(y, x)` so that "smaller cell" means
/// row-major order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub x: usize,
    pub y: usize,
}

impl Cell {
    pub const fn new(x: usize, y: usize) -> Self {
        Cell { x, y }
    }

    pub fn manhattan(self, other: Cell) -> usize {
        self.x.abs_diff(other.x) + self.y.abs_diff(other.y)
    }

    /// True when `other` equals `self` or is one of its 4-neighbors.
    pub fn is_adjacent_or_same(self, other: Cell) -> bool {
        self.manhattan(other) <= 1
    }
}

impl Ord for Cell {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.y, self.x).cmp(&(other.y, other.x))
    }
}

impl PartialOrd for Cell {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Occupancy {
    Free,
    Occupied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    width: usize,
    height: usize,
    occupancy: Vec<Occupancy>,
    meters_per_cell: f64,
}

impl GridMap {
    pub fn new(width: usize, height: usize, occupancy: Vec<Occupancy>) -> Result<Self, GridError> {
        if width < 2 || height < 2 {
            return Err(GridError::InvalidMap(format!(
                "dimensions {width}x{height} below 2x2"
            )));
        }
        if occupancy.len() != width * height {
            return Err(GridError::InvalidMap(format!(
                "occupancy has {} cells, expected {}",
                occupancy.len(),
                width * height
            )));
        }
        if !occupancy.contains(&Occupancy::Free) {
            return Err(GridError::InvalidMap("no free cell".into()));
        }
        Ok(GridMap {
            width,
            height,
            occupancy,
            meters_per_cell: 1.0,
        })
    }

    /// An all-free map.
    pub fn empty(width: usize, height: usize) -> Result<Self, GridError> {
        Self::new(width, height, vec![Occupancy::Free; width * height])
    }

    /// Builds a map from rows of `.` (free) and `#` (occupied).
    pub fn from_rows(rows: &[&str]) -> Result<Self, GridError> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.len());
        let mut occ = Vec::with_capacity(width * height);
        for (y, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(GridError::Parse {
                    line: y + 1,
                    column: row.len().min(width) + 1,
                    message: format!("row has {} cells, expected {width}", row.len()),
                });
            }
            for (x, ch) in row.chars().enumerate() {
                occ.push(parse_cell(ch).ok_or_else(|| GridError::Parse {
                    line: y + 1,
                    column: x + 1,
                    message: format!("unexpected character {ch:?}"),
                })?);
            }
        }
        Self::new(width, height, occ)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn meters_per_cell(&self) -> f64 {
        self.meters_per_cell
    }

    pub fn with_meters_per_cell(mut self, meters: f64) -> Self {
        assert!(meters > 0.0, "meters_per_cell must be positive");
        self.meters_per_cell = meters;
        self
    }

    pub fn num_cells(&self) -> usize {
        self.width * self.height
    }

    pub fn occupancy(&self) -> &[Occupancy] {
        &self.occupancy
    }

    pub fn in_bounds(&self, c: Cell) -> bool {
        c.x < self.width && c.y < self.height
    }

    pub fn index(&self, c: Cell) -> usize {
        c.y * self.width + c.x
    }

    pub fn cell(&self, index: usize) -> Cell {
        Cell::new(index % self.width, index / self.width)
    }

    /// False for out-of-bounds cells.
    pub fn is_free(&self, c: Cell) -> bool {
        self.in_bounds(c) && self.occupancy[self.index(c)] == Occupancy::Free
    }

    pub fn set(&mut self, c: Cell, value: Occupancy) {
        let i = self.index(c);
        self.occupancy[i] = value;
    }

    pub fn free_cells(&self) -> Vec<Cell> {
        (0..self.num_cells())
            .filter(|&i| self.occupancy[i] == Occupancy::Free)
            .map(|i| self.cell(i))
            .collect()
    }

    pub fn free_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o == Occupancy::Free).count()
    }

    /// Free 4-neighbors of `c` in the order up, right, down, left.
    pub fn neighbors(&self, c: Cell) -> Result<Vec<Cell>, GridError> {
        if !self.in_bounds(c) {
            return Err(GridError::OutOfBounds(c));
        }
        if !self.is_free(c) {
            return Err(GridError::OccupiedCell(c));
        }
        Ok(self.adjacent_free(c).collect())
    }

    /// Unchecked variant of [`GridMap::neighbors`] for hot loops; `c` must be
    /// in bounds.
    pub fn adjacent_free(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let up = (c.y > 0).then(|| Cell::new(c.x, c.y - 1));
        let right = (c.x + 1 < self.width).then(|| Cell::new(c.x + 1, c.y));
        let down = (c.y + 1 < self.height).then(|| Cell::new(c.x, c.y + 1));
        let left = (c.x > 0).then(|| Cell::new(c.x - 1, c.y));
        [up, right, down, left]
            .into_iter()
            .flatten()
            .filter(move |&n| self.occupancy[self.index(n)] == Occupancy::Free)
    }

    /// Connected components of free space; each component sorted, components
    /// ordered by their smallest cell.
    pub fn free_components(&self) -> Vec<Vec<Cell>> {
        let mut label = vec![usize::MAX; self.num_cells()];
        let mut comps = Vec::new();
        for start in 0..self.num_cells() {
            if self.occupancy[start] != Occupancy::Free || label[start] != usize::MAX {
                continue;
            }
            let id = comps.len();
            let mut comp = Vec::new();
            let mut queue = VecDeque::from([start]);
            label[start] = id;
            while let Some(i) = queue.pop_front() {
                let c = self.cell(i);
                comp.push(c);
                for n in self.adjacent_free(c) {
                    let j = self.index(n);
                    if label[j] == usize::MAX {
                        label[j] = id;
                        queue.push_back(j);
                    }
                }
            }
            comp.sort();
            comps.push(comp);
        }
        comps
    }

    pub fn is_connected(&self) -> bool {
        self.free_components().len() == 1
    }

    /// Serializes to the `P-GRID` text format.
    pub fn to_text(&self) -> String {
        let mut out = format!("P-GRID {} {}\n", self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.push(match self.occupancy[y * self.width + x] {
                    Occupancy::Free => '.',
                    Occupancy::Occupied => '#',
                });
            }
            out.push('\n');
        }
        out
    }

    /// Parses the `P-GRID` text format.
    pub fn from_text(text: &str) -> Result<Self, GridError> {
        let mut lines = text.split('\n');
        let header = lines.next().unwrap_or("");
        let mut parts = header.split(' ');
        if parts.next() != Some("P-GRID") {
            return Err(GridError::Parse {
                line: 1,
                column: 1,
                message: "expected header `P-GRID <width> <height>`".into(),
            });
        }
        let mut dim = |name: &str, column: usize| -> Result<usize, GridError> {
            parts
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| GridError::Parse {
                    line: 1,
                    column,
                    message: format!("missing or malformed {name}"),
                })
        };
        let width = dim("width", 8)?;
        let height = dim("height", 8 + width.to_string().len() + 1)?;
        if parts.next().is_some() {
            return Err(GridError::Parse {
                line: 1,
                column: header.len(),
                message: "trailing tokens in header".into(),
            });
        }
        let mut occ = Vec::with_capacity(width * height);
        for y in 0..height {
            let line_no = y + 2;
            let row = lines.next().ok_or_else(|| GridError::Parse {
                line: line_no,
                column: 1,
                message: format!("expected {height} rows, found {y}"),
            })?;
            for (x, ch) in row.chars().enumerate() {
                if x >= width {
                    return Err(GridError::Parse {
                        line: line_no,
                        column: x + 1,
                        message: format!("row longer than width {width}"),
                    });
                }
                occ.push(parse_cell(ch).ok_or_else(|| GridError::Parse {
                    line: line_no,
                    column: x + 1,
                    message: format!("unexpected character {ch:?}"),
                })?);
            }
            let len = row.chars().count();
            if len < width {
                return Err(GridError::Parse {
                    line: line_no,
                    column: len + 1,
                    message: format!("row shorter than width {width}"),
                });
            }
        }
        for (k, rest) in lines.enumerate() {
            if !rest.is_empty() {
                return Err(GridError::Parse {
                    line: height + 2 + k,
                    column: 1,
                    message: "unexpected content after last row".into(),
                });
            }
        }
        Self::new(width, height, occ).map_err(|e| GridError::Parse {
            line: 1,
            column: 1,
            message: e.to_string(),
        })
    }
}

fn parse_cell(ch: char) -> Option<Occupancy> {
    match ch {
        '.' => Some(Occupancy::Free),
        '#' => Some(Occupancy::Occupied),
        _ => None,
    }
}

pub fn save_map(map: &GridMap) -> String {
    map.to_text()
}

pub fn load_map(text: &str) -> Result<GridMap, GridError> {
    GridMap::from_text(text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarehouseGenParams {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Distance between consecutive shelf rows.
    pub shelf_row_period: usize,
    /// Spacing of the door gaps cut into every shelf row.
    pub shelf_gap_period: usize,
    /// Probability that an aisle cell receives an extra obstacle.
    pub obstacle_density_jitter: f64,
}

impl WarehouseGenParams {
    pub fn new(seed: u64, width: usize, height: usize) -> Self {
        WarehouseGenParams {
            seed,
            width,
            height,
            shelf_row_period: 3,
            shelf_gap_period: 6,
            obstacle_density_jitter: 0.1,
        }
    }
}

const MAX_REPAIR_ATTEMPTS: usize = 100;
const MIN_FREE_FRACTION: f64 = 0.2;
const MAX_FREE_FRACTION: f64 = 0.8;

/// Periodic shelf rows with door gaps plus jittered obstacles, then carved
/// until free space is a single component.
pub fn generate_warehouse_map(params: &WarehouseGenParams) -> Result<GridMap, GridError> {
    let WarehouseGenParams {
        seed,
        width,
        height,
        shelf_row_period,
        shelf_gap_period,
        obstacle_density_jitter,
    } = *params;
    if !(8..=128).contains(&width) || !(8..=128).contains(&height) {
        return Err(GridError::InvalidParams(format!(
            "dimensions {width}x{height} outside [8, 128]"
        )));
    }
    if shelf_row_period < 2 || shelf_gap_period < 2 {
        return Err(GridError::InvalidParams(
            "shelf periods must be at least 2".into(),
        ));
    }
    if !(0.0..1.0).contains(&obstacle_density_jitter) {
        return Err(GridError::InvalidParams(format!(
            "obstacle_density_jitter {obstacle_density_jitter} outside [0, 1)"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occ = vec![Occupancy::Free; width * height];
    let idx = |x: usize, y: usize| y * width + x;

    // Shelf rows inside a one-cell outer aisle ring.
    let row_phase = rng.gen_range(0..shelf_row_period);
    for y in 2..height.saturating_sub(2) {
        if (y - 2 + row_phase) % shelf_row_period != 0 {
            continue;
        }
        let gap_phase = rng.gen_range(0..shelf_gap_period);
        for x in 2..width - 2 {
            if (x + gap_phase) % shelf_gap_period != 0 {
                occ[idx(x, y)] = Occupancy::Occupied;
            }
        }
    }
    for y in 1..height - 1 {
        for x in 1..width - 1 {
            if occ[idx(x, y)] == Occupancy::Free && rng.gen::<f64>() < obstacle_density_jitter {
                occ[idx(x, y)] = Occupancy::Occupied;
            }
        }
    }

    let mut map = GridMap {
        width,
        height,
        occupancy: occ,
        meters_per_cell: 1.0,
    };
    let mut attempts = 0;
    loop {
        let comps = map.free_components();
        if comps.len() <= 1 {
            break;
        }
        if attempts == MAX_REPAIR_ATTEMPTS {
            return Err(GridError::GenerationFailed { attempts });
        }
        attempts += 1;
        carve_connection(&mut map, &comps);
    }

    let free = map.free_count() as f64 / map.num_cells() as f64;
    if !(MIN_FREE_FRACTION..=MAX_FREE_FRACTION).contains(&free) {
        return Err(GridError::GenerationFailed { attempts });
    }
    Ok(map)
}

/// Connects the smallest component to the rest of free space along a
/// shortest route through occupied cells.
fn carve_connection(map: &mut GridMap, comps: &[Vec<Cell>]) {
    let n = map.num_cells();
    let mut comp_of = vec![usize::MAX; n];
    for (k, comp) in comps.iter().enumerate() {
        for &c in comp {
            comp_of[map.index(c)] = k;
        }
    }
    let (small, _) = comps
        .iter()
        .enumerate()
        .min_by_key(|(k, c)| (c.len(), *k))
        .expect("at least two components");

    let mut prev = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    let mut queue = VecDeque::new();
    for &c in &comps[small] {
        let i = map.index(c);
        seen[i] = true;
        queue.push_back(i);
    }
    while let Some(i) = queue.pop_front() {
        if comp_of[i] != usize::MAX && comp_of[i] != small {
            let mut j = prev[i];
            while j != usize::MAX && comp_of[j] != small {
                map.occupancy[j] = Occupancy::Free;
                j = prev[j];
            }
            return;
        }
        let c = map.cell(i);
        let candidates = [
            (c.y > 0).then(|| Cell::new(c.x, c.y - 1)),
            (c.x + 1 < map.width).then(|| Cell::new(c.x + 1, c.y)),
            (c.y + 1 < map.height).then(|| Cell::new(c.x, c.y + 1)),
            (c.x > 0).then(|| Cell::new(c.x - 1, c.y)),
        ];
        for nb in candidates.into_iter().flatten() {
            let j = map.index(nb);
            if !seen[j] {
                seen[j] = true;
                prev[j] = i;
                queue.push_back(j);
            }
        }
    }
}
