//! Belief-guided object navigation: occupancy from the belief, waypoint
//! selection, A*, mental simulation of candidate paths inside sampled
//! hypotheses, and the episode metrics.

mod navigate;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};

use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{level_rotation, CameraPose, Vec3};
use crate::hypothesis::{FreeSpace, GridSpec, HypothesisError};
use crate::render::render;
use crate::scene::{Observation, SceneBelief};
use crate::semantic::{query_heatmap, Embedding, SemanticError};
use crate::world::{RayLog, WorldError};

pub use navigate::mix;
pub use navigate::{
    actions_along, episode_setup, ground_truth, navigate, run_episodes, write_results_csv, Ablation, Components,
    EpisodeResult, EpisodeSpec, GroundTruth, NavConfig, RESULT_COLUMNS,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("height band [{0}, {1}] is empty")]
    InvalidBand(f64, f64),
    #[error("no frontier cells left to explore")]
    NoFrontier,
    #[error("waypoint count must be at least 1")]
    InvalidCount,
    #[error("empty result set")]
    EmptyResultSet,
    #[error("invalid navigation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
}

pub type Cell = [usize; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellState {
    Free,
    Occupied,
    Unknown,
}

/// Top-down navigation grid; `origin` is the min corner of cell (0, 0).
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub origin: [f64; 2],
    pub cell: f64,
    pub dims: [usize; 2],
    pub cells: Vec<CellState>,
}

impl OccupancyGrid {
    pub fn new(origin: [f64; 2], cell: f64, dims: [usize; 2], fill: CellState) -> Self {
        assert!(dims[0] > 0 && dims[1] > 0, "grid must have cells");
        Self {
            origin,
            cell,
            dims,
            cells: vec![fill; dims[0] * dims[1]],
        }
    }

    /// Same footprint as a voxel spec.
    pub fn from_spec(spec: &GridSpec, fill: CellState) -> Self {
        Self::new(
            [spec.origin[0], spec.origin[1]],
            spec.cell,
            [spec.dims[0], spec.dims[1]],
            fill,
        )
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn index(&self, c: Cell) -> usize {
        c[1] * self.dims[0] + c[0]
    }

    pub fn cell_at(&self, idx: usize) -> Cell {
        [idx % self.dims[0], idx / self.dims[0]]
    }

    pub fn get(&self, c: Cell) -> CellState {
        self.cells[self.index(c)]
    }

    pub fn set(&mut self, c: Cell, s: CellState) {
        let i = self.index(c);
        self.cells[i] = s;
    }

    pub fn center(&self, c: Cell) -> [f64; 2] {
        [
            self.origin[0] + (c[0] as f64 + 0.5) * self.cell,
            self.origin[1] + (c[1] as f64 + 0.5) * self.cell,
        ]
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        let fx = ((x - self.origin[0]) / self.cell).floor();
        let fy = ((y - self.origin[1]) / self.cell).floor();
        if fx < 0.0 || fy < 0.0 || fx >= self.dims[0] as f64 || fy >= self.dims[1] as f64 {
            return None;
        }
        Some([fx as usize, fy as usize])
    }

    pub fn neighbors4(&self, c: Cell) -> impl Iterator<Item = Cell> + '_ {
        let [x, y] = c;
        [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)]
            .into_iter()
            .filter_map(move |(dx, dy)| {
                let nx = x as i64 + dx;
                let ny = y as i64 + dy;
                (nx >= 0 && ny >= 0 && (nx as usize) < self.dims[0] && (ny as usize) < self.dims[1])
                    .then_some([nx as usize, ny as usize])
            })
    }

    pub fn count(&self, s: CellState) -> usize {
        self.cells.iter().filter(|c| **c == s).count()
    }

    /// Marks Occupied every cell whose center lies within `radius` of one
    /// of the given xy points.
    pub fn inflate_points(&mut self, points: impl IntoIterator<Item = [f64; 2]>, radius: f64) {
        let r = (radius / self.cell).ceil() as i64 + 1;
        for p in points {
            let Some(c) = self.cell_of(p[0], p[1]) else {
                continue;
            };
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (c[0] as i64 + dx, c[1] as i64 + dy);
                    if x < 0 || y < 0 || x >= self.dims[0] as i64 || y >= self.dims[1] as i64 {
                        continue;
                    }
                    let q = [x as usize, y as usize];
                    let m = self.center(q);
                    if (m[0] - p[0]).hypot(m[1] - p[1]) < radius {
                        self.set(q, CellState::Occupied);
                    }
                }
            }
        }
    }

    pub fn is_frontier(&self, c: Cell) -> bool {
        self.get(c) == CellState::Free && self.neighbors4(c).any(|n| self.get(n) == CellState::Unknown)
    }
}

/// Minimum opacity for a primitive to mark its cell occupied.
pub const OCCUPIED_OPACITY: f64 = 0.3;
/// Cosine with the floor embedding above which a primitive counts as floor.
pub const FLOOR_COSINE: f64 = 0.9;

/// Floor evidence counts only within this fraction of a cell from its center.
const FLOOR_CORE: f64 = 0.25;
/// Rays that end on a surface are carved only up to this distance (m) short
/// of it.
pub const SURFACE_MARGIN: f64 = 0.15;

/// Side of the central square, in cells, a ray must cross to free a voxel.
const CARVE_CORE: f64 = 0.5;

/// Carve every `stride`-th ray (in both image axes) of an observation into
/// `free`, stopping [`SURFACE_MARGIN`] short of any surface hit. Only voxels
/// whose central part the ray crosses are marked, so cells holding a thin
/// surface near their border are not freed by grazing rays.
pub fn carve_rays(free: &mut FreeSpace, log: &RayLog, width: usize, stride: usize) {
    let stride = stride.max(1);
    for (i, (end, hit)) in log.ends.iter().enumerate() {
        if (i / width) % stride != 0 || (i % width) % stride != 0 {
            continue;
        }
        if !*hit {
            free.carve_core(&log.origin, end, CARVE_CORE);
            continue;
        }
        let d = end - log.origin;
        let len = d.norm();
        if len > SURFACE_MARGIN {
            free.carve_core(&log.origin, &(log.origin + d * ((len - SURFACE_MARGIN) / len)), CARVE_CORE);
        }
    }
}

/// Project a belief onto the navigation plane. A cell is Occupied when a
/// primitive with mean z inside `band` and opacity ≥ 0.3 lies in it; Free
/// when the voxel just above the band bottom was carved by observation rays
/// or a floor primitive sits near its center; Unknown otherwise.
pub fn belief_occupancy(
    belief: &SceneBelief,
    free: &FreeSpace,
    spec: &GridSpec,
    band: [f64; 2],
    floor: &Embedding,
) -> Result<OccupancyGrid, PlannerError> {
    if !(band[0] < band[1]) {
        return Err(PlannerError::InvalidBand(band[0], band[1]));
    }
    let mut grid = OccupancyGrid::from_spec(spec, CellState::Unknown);
    let mut floor_cells = Vec::new();
    for p in &belief.primitives {
        let m = p.mean();
        let Some(c) = grid.cell_of(m.x, m.y) else {
            continue;
        };
        if m.z >= band[0] && m.z <= band[1] && p.opacity() >= OCCUPIED_OPACITY {
            grid.set(c, CellState::Occupied);
        } else if m.z < band[0] && floor.cosine(p.embedding()) >= FLOOR_COSINE {
            // floor seen right at a wall base would free the wall's cell
            let [cx, cy] = grid.center(c);
            if (m.x - cx).abs().max((m.y - cy).abs()) <= FLOOR_CORE * grid.cell {
                floor_cells.push(c);
            }
        }
    }
    for c in floor_cells {
        if grid.get(c) == CellState::Unknown {
            grid.set(c, CellState::Free);
        }
    }
    if !free.is_empty() {
        let probe_z = band[0] + 0.5 * free.cell();
        for i in 0..grid.len() {
            if grid.cells[i] != CellState::Unknown {
                continue;
            }
            let [x, y] = grid.center(grid.cell_at(i));
            if free.contains(&Vec3::new(x, y, probe_z)) {
                grid.cells[i] = CellState::Free;
            }
        }
    }
    Ok(grid)
}

fn step_cost(s: CellState, unknown_mult: f64) -> Option<f64> {
    match s {
        CellState::Free => Some(1.0),
        CellState::Unknown => Some(unknown_mult),
        CellState::Occupied => None,
    }
}

#[derive(PartialEq)]
struct Queued {
    f: f64,
    g: f64,
    idx: usize,
}

impl Eq for Queued {}

impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on f, then larger g, then index
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&other.g))
            .then_with(|| other.idx.cmp(&self.idx))
    }
}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// 4-connected minimum-cost path from `start` to `goal` (both included) and
/// its cost. Entering a Free cell costs 1, an Unknown cell `unknown_mult`;
/// Occupied cells are impassable. The start cell is never charged.
pub fn astar(grid: &OccupancyGrid, start: Cell, goal: Cell, unknown_mult: f64) -> Option<(Vec<Cell>, f64)> {
    step_cost(grid.get(goal), unknown_mult)?;
    let min_cost = unknown_mult.min(1.0);
    let h = |c: Cell| min_cost * (c[0].abs_diff(goal[0]) + c[1].abs_diff(goal[1])) as f64;
    let n = grid.len();
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let s = grid.index(start);
    let t = grid.index(goal);
    g[s] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(Queued { f: h(start), g: 0.0, idx: s });
    while let Some(Queued { g: gc, idx, .. }) = open.pop() {
        if closed[idx] {
            continue;
        }
        closed[idx] = true;
        if idx == t {
            let mut path = vec![grid.cell_at(t)];
            let mut cur = t;
            while cur != s {
                cur = parent[cur];
                path.push(grid.cell_at(cur));
            }
            path.reverse();
            return Some((path, gc));
        }
        let c = grid.cell_at(idx);
        for nb in grid.neighbors4(c) {
            let ni = grid.index(nb);
            let Some(w) = step_cost(grid.cells[ni], unknown_mult) else {
                continue;
            };
            let ng = gc + w;
            if ng < g[ni] {
                g[ni] = ng;
                parent[ni] = idx;
                open.push(Queued {
                    f: ng + h(nb),
                    g: ng,
                    idx: ni,
                });
            }
        }
    }
    None
}

/// Cost-to-reach from `start` for every cell under the [`astar`] cost model.
pub fn cost_field(grid: &OccupancyGrid, start: Cell, unknown_mult: f64) -> Vec<f64> {
    let n = grid.len();
    let mut g = vec![f64::INFINITY; n];
    let s = grid.index(start);
    g[s] = 0.0;
    let mut open = BinaryHeap::new();
    open.push(Queued { f: 0.0, g: 0.0, idx: s });
    while let Some(Queued { g: gc, idx, .. }) = open.pop() {
        if gc > g[idx] {
            continue;
        }
        for nb in grid.neighbors4(grid.cell_at(idx)) {
            let ni = grid.index(nb);
            if let Some(w) = step_cost(grid.cells[ni], unknown_mult) {
                if gc + w < g[ni] {
                    g[ni] = gc + w;
                    open.push(Queued {
                        f: gc + w,
                        g: gc + w,
                        idx: ni,
                    });
                }
            }
        }
    }
    g
}

fn dist2(a: Cell, b: Cell) -> f64 {
    let dx = a[0] as f64 - b[0] as f64;
    let dy = a[1] as f64 - b[1] as f64;
    dx * dx + dy * dy
}

/// Candidate waypoints. A localized goal is returned alone. Otherwise up to
/// `k_w` frontier cells are chosen by farthest-point sampling, seeded with
/// the frontier nearest the agent; frontiers within `radius` (m) are
/// preferred and the whole grid is used only when none are that close.
/// Cells in `exclude` are never returned.
pub fn sample_waypoints(
    grid: &OccupancyGrid,
    agent: Cell,
    goal: Option<Cell>,
    k_w: usize,
    radius: f64,
    exclude: &HashSet<Cell>,
) -> Result<Vec<Cell>, PlannerError> {
    if k_w == 0 {
        return Err(PlannerError::InvalidCount);
    }
    if let Some(g) = goal {
        return Ok(vec![g]);
    }
    let frontiers: Vec<Cell> = (0..grid.len())
        .map(|i| grid.cell_at(i))
        .filter(|c| *c != agent && !exclude.contains(c) && grid.is_frontier(*c))
        .collect();
    if frontiers.is_empty() {
        return Err(PlannerError::NoFrontier);
    }
    let r2 = (radius / grid.cell).powi(2);
    let near: Vec<Cell> = frontiers.iter().copied().filter(|c| dist2(*c, agent) <= r2).collect();
    let pool = if near.is_empty() { frontiers } else { near };
    let first = *pool
        .iter()
        .min_by(|a, b| dist2(**a, agent).total_cmp(&dist2(**b, agent)))
        .unwrap();
    let mut chosen = vec![first];
    let mut dmin: Vec<f64> = pool.iter().map(|c| dist2(*c, first)).collect();
    while chosen.len() < k_w {
        let (i, d) = dmin
            .iter()
            .enumerate()
            .fold((0, -1.0), |acc, (i, d)| if *d > acc.1 { (i, *d) } else { acc });
        if d <= 0.0 {
            break;
        }
        let c = pool[i];
        chosen.push(c);
        for (j, p) in pool.iter().enumerate() {
            dmin[j] = dmin[j].min(dist2(*p, c));
        }
    }
    Ok(chosen)
}

/// Camera poses for every `stride`-th path point after the start, always
/// ending at the last point, each looking along the incoming path direction.
/// A single-point path uses the template heading.
pub fn path_poses(path: &[[f64; 2]], template: &CameraPose, stride: usize) -> Vec<CameraPose> {
    assert!(!path.is_empty(), "path must be non-empty");
    let stride = stride.max(1);
    let z = template.position.z;
    let fwd = template.forward();
    let base_yaw = fwd.y.atan2(fwd.x);
    let yaw_at = |i: usize| {
        if i == 0 {
            return base_yaw;
        }
        let (a, b) = (path[i - 1], path[i]);
        (b[1] - a[1]).atan2(b[0] - a[0])
    };
    let last = path.len() - 1;
    let mut idx: Vec<usize> = (1..=last).filter(|i| i % stride == 0).collect();
    if idx.last() != Some(&last) {
        idx.push(last);
    }
    idx.into_iter()
        .map(|i| {
            let p = path[i];
            CameraPose::new(Vec3::new(p[0], p[1], z), level_rotation(yaw_at(i)), template.intrinsics)
                .expect("level rotation is orthonormal")
        })
        .collect()
}

/// Render each hypothesis at the [`path_poses`] of `path`.
pub fn mental_simulate(
    hypotheses: &[SceneBelief],
    path: &[[f64; 2]],
    template: &CameraPose,
    stride: usize,
) -> Vec<Vec<Observation>> {
    let poses = path_poses(path, template, stride);
    hypotheses
        .par_iter()
        .map(|h| poses.iter().map(|p| render(h, p)).collect())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreWeights {
    pub w_sem: f64,
    pub w_info: f64,
    /// Radius (m) around the path counted for information gain.
    pub info_radius: f64,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_sem: 1.0,
            w_info: 0.3,
            info_radius: 1.0,
        }
    }
}

/// Best query response per hypothesis over all its frames, floored at 0.
/// Pixels without a semantic feature are ignored.
pub fn semantic_scores(rollout: &[Vec<Observation>], query: &Embedding) -> Vec<f64> {
    rollout
        .iter()
        .map(|frames| {
            frames
                .iter()
                .filter_map(|o| query_heatmap(&o.semantic, query).ok())
                .flat_map(|hm| hm.into_iter().filter(|v| *v > -1.0))
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Unknown cells within `radius` of any path cell, divided by the path length
/// in cells.
pub fn info_gain(grid: &OccupancyGrid, path: &[Cell], radius: f64) -> f64 {
    if path.is_empty() {
        return 0.0;
    }
    let r = (radius / grid.cell).floor() as i64;
    let r2 = (radius / grid.cell).powi(2);
    let mut seen = HashSet::new();
    for c in path {
        for dy in -r..=r {
            for dx in -r..=r {
                if (dx * dx + dy * dy) as f64 > r2 + 1e-9 {
                    continue;
                }
                let (x, y) = (c[0] as i64 + dx, c[1] as i64 + dy);
                if x < 0 || y < 0 || x >= grid.dims[0] as i64 || y >= grid.dims[1] as i64 {
                    continue;
                }
                let cell = [x as usize, y as usize];
                if grid.get(cell) == CellState::Unknown {
                    seen.insert(cell);
                }
            }
        }
    }
    seen.len() as f64 / path.len() as f64
}

/// `w_sem · mean_k(semantic score) + w_info · info_gain`. No hypotheses
/// means no semantic term.
pub fn score_path(
    rollout: &[Vec<Observation>],
    query: &Embedding,
    grid: &OccupancyGrid,
    path: &[Cell],
    weights: &ScoreWeights,
) -> f64 {
    let sem = semantic_scores(rollout, query);
    let mean = if sem.is_empty() {
        0.0
    } else {
        sem.iter().sum::<f64>() / sem.len() as f64
    };
    weights.w_sem * mean + weights.w_info * info_gain(grid, path, weights.info_radius)
}

/// One scored candidate plan.
#[derive(Clone, Debug)]
pub struct PlanRollout {
    pub waypoint: [f64; 2],
    pub path: Vec<Cell>,
    pub imagined: Vec<Vec<Observation>>,
    pub score: f64,
    pub hypothesis_scores: Vec<f64>,
}

pub fn sr(results: &[EpisodeResult]) -> Result<f64, PlannerError> {
    mean_of(results, |r| if r.success { 1.0 } else { 0.0 })
}

/// Mean of `S·l / max(p, l)`.
pub fn spl(results: &[EpisodeResult]) -> Result<f64, PlannerError> {
    mean_of(results, |r| {
        if !r.success {
            return 0.0;
        }
        let (l, p) = (r.shortest_path_length, r.path_length);
        if l.max(p) == 0.0 {
            1.0
        } else {
            l / l.max(p)
        }
    })
}

/// Mean of `S·e* / max(e, e*)` with `e` the steps taken.
pub fn sel(results: &[EpisodeResult]) -> Result<f64, PlannerError> {
    mean_of(results, |r| {
        if !r.success {
            return 0.0;
        }
        let (e, o) = (r.steps as f64, r.oracle_steps as f64);
        if e.max(o) == 0.0 {
            1.0
        } else {
            o / e.max(o)
        }
    })
}

fn mean_of(results: &[EpisodeResult], f: impl Fn(&EpisodeResult) -> f64) -> Result<f64, PlannerError> {
    if results.is_empty() {
        return Err(PlannerError::EmptyResultSet);
    }
    Ok(results.iter().map(f).sum::<f64>() / results.len() as f64)
}


#[cfg(test)]
mod tests;
