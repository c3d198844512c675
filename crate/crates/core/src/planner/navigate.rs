//! The closed navigation loop and its ground-truth references.

use std::collections::{HashMap, HashSet, VecDeque};
use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    astar, belief_occupancy, carve_rays, cost_field, mental_simulate, sample_waypoints, score_path, Cell, CellState,
    OccupancyGrid, PlannerError, ScoreWeights, OCCUPIED_OPACITY,
};
use crate::diffusion::denoiser::DenoiserParams;
use crate::diffusion::NoiseSchedule;
use crate::geometry::{wrap_angle, CameraPose, Intrinsics, Vec3};
use crate::hypothesis::{
    lift_to_gaussians, rasterize_observed, sample_hypotheses, FreeSpace, GridSpec, SamplerConfig, DEFAULT_CELL,
};
use crate::scene::{BeliefError, SceneBelief};
use crate::semantic::{localize_filtered, Embedding, EmbeddingProvider};
use crate::world::io::TraceRecord;
use crate::world::{Action, AgentState, Sensor, World, WorldConfig, FORWARD_STEP, TURN_ANGLE};

/// Which parts of the belief the planner may use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// K forced to 1.
    SingleHypothesis,
    /// No hypotheses and no goal localization: frontier exploration scored
    /// by information gain alone.
    NoGeometry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavConfig {
    pub k: usize,
    pub t_exec: usize,
    pub budget: usize,
    pub unknown_cost: f64,
    pub w_sem: f64,
    pub w_info: f64,
    pub waypoints: usize,
    /// Frontiers within this distance (m) are preferred.
    pub frontier_radius: f64,
    /// Side of the square sampling window around the agent, in cells.
    pub window: usize,
    pub sampler_steps: usize,
    pub render_width: usize,
    pub render_height: usize,
    /// Render every n-th cell along a candidate path.
    pub sim_stride: usize,
    /// Pixel stride for belief updates and free-space carving.
    pub pixel_stride: usize,
    pub band: [f64; 2],
    pub min_score: f64,
    /// Goal approach cells lie within this distance (m) of a matching primitive.
    pub goal_reach: f64,
    /// Cells whose center is closer than this (m) to an observed obstacle
    /// point are not planned through.
    pub clearance: f64,
    pub ablation: Ablation,
}

impl Default for NavConfig {
    fn default() -> Self {
        Self {
            k: 3,
            t_exec: 4,
            budget: 200,
            unknown_cost: 2.0,
            w_sem: 1.0,
            w_info: 0.3,
            waypoints: 4,
            frontier_radius: 3.0,
            window: 16,
            sampler_steps: 8,
            render_width: 32,
            render_height: 24,
            sim_stride: 4,
            pixel_stride: 2,
            band: [0.125, 1.8],
            min_score: crate::semantic::DEFAULT_MIN_SCORE,
            goal_reach: 1.0,
            clearance: crate::world::AGENT_RADIUS + 0.02,
            ablation: Ablation::Full,
        }
    }
}

impl NavConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::InvalidConfig(m.into()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.t_exec == 0 || self.waypoints == 0 || self.sim_stride == 0 || self.pixel_stride == 0 {
            return bad("t_exec, waypoints, sim_stride and pixel_stride must be positive");
        }
        if self.window == 0 || self.render_width == 0 || self.render_height == 0 || self.sampler_steps == 0 {
            return bad("window, render size and sampler_steps must be positive");
        }
        if !(self.unknown_cost >= 1.0) {
            return bad("unknown_cost must be at least 1");
        }
        if !(self.band[0] < self.band[1]) {
            return bad("band must be increasing");
        }
        Ok(())
    }

    /// Hypotheses drawn per replan under the ablation.
    pub fn effective_k(&self) -> usize {
        match self.ablation {
            Ablation::Full => self.k,
            Ablation::SingleHypothesis => 1,
            Ablation::NoGeometry => 0,
        }
    }

    fn weights(&self) -> ScoreWeights {
        ScoreWeights {
            w_sem: self.w_sem,
            w_info: self.w_info,
            ..ScoreWeights::default()
        }
    }
}

/// Everything the loop needs besides the world.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub denoiser: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
    pub provider: &'a EmbeddingProvider,
    pub sensor: &'a Sensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult {
    pub episode: usize,
    pub seed: u64,
    pub target: String,
    pub success: bool,
    pub steps: usize,
    pub path_length: f64,
    pub shortest_path_length: f64,
    pub oracle_steps: usize,
    pub collisions: usize,
    pub trace: Vec<TraceRecord>,
}

/// Shortest lattice path to any success state and the fewest primitive
/// actions (Done included) that end an episode successfully.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub shortest_cells: usize,
    pub shortest_length: f64,
    pub oracle_steps: usize,
}

fn lattice(world: &World) -> OccupancyGrid {
    let spec = world.grid_spec();
    let mut g = OccupancyGrid::from_spec(&spec, CellState::Free);
    for i in 0..g.len() {
        let [x, y] = g.center(g.cell_at(i));
        if world.collides(x, y) {
            g.cells[i] = CellState::Occupied;
        }
    }
    g
}

const HEADINGS: usize = 12;

fn heading_index(h: f64) -> usize {
    ((wrap_angle(h) / TURN_ANGLE).round() as usize) % HEADINGS
}

/// Reference path and step counts from `start` by breadth-first search over
/// collision-free lattice cells and (cell, heading) states. `None` when no
/// success state is reachable.
pub fn ground_truth(world: &World, start: &AgentState, target: &str, sensor: &Sensor) -> Option<GroundTruth> {
    let grid = lattice(world);
    let s = grid.cell_of(start.position[0], start.position[1])?;
    let ids = world.targets_of(target);
    if ids.is_empty() {
        return None;
    }
    let n = grid.len();
    let mut success = vec![[false; HEADINGS]; n];
    for i in 0..n {
        if grid.cells[i] != CellState::Free {
            continue;
        }
        let [x, y] = grid.center(grid.cell_at(i));
        let near = ids
            .iter()
            .any(|id| world.furniture[*id].aabb.footprint_distance(x, y) <= sensor.success_radius);
        if !near {
            continue;
        }
        for (h, ok) in success[i].iter_mut().enumerate() {
            let st = AgentState {
                position: [x, y],
                heading: wrap_angle(h as f64 * TURN_ANGLE),
            };
            *ok = world.check_success(&st, target, sensor).unwrap_or(false);
        }
    }
    // cell distances
    let mut dist = vec![usize::MAX; n];
    let si = grid.index(s);
    dist[si] = 0;
    let mut q = VecDeque::from([si]);
    while let Some(i) = q.pop_front() {
        for nb in grid.neighbors4(grid.cell_at(i)) {
            let j = grid.index(nb);
            if grid.cells[j] == CellState::Free && dist[j] == usize::MAX {
                dist[j] = dist[i] + 1;
                q.push_back(j);
            }
        }
    }
    let shortest = (0..n)
        .filter(|i| success[*i].iter().any(|b| *b))
        .map(|i| dist[i])
        .min()
        .filter(|d| *d != usize::MAX)?;
    // state distances: rotations and axis-aligned forward moves
    let mut sd = vec![usize::MAX; n * HEADINGS];
    let h0 = heading_index(start.heading);
    sd[si * HEADINGS + h0] = 0;
    let mut q = VecDeque::from([(si, h0)]);
    let mut oracle = None;
    while let Some((i, h)) = q.pop_front() {
        let d = sd[i * HEADINGS + h];
        if success[i][h] {
            oracle = Some(d + 1);
            break;
        }
        let mut next = vec![(i, (h + 1) % HEADINGS), (i, (h + HEADINGS - 1) % HEADINGS)];
        if h % 3 == 0 {
            let [x, y] = grid.cell_at(i);
            let (dx, dy) = [(1i64, 0i64), (0, 1), (-1, 0), (0, -1)][h / 3];
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx >= 0 && ny >= 0 && (nx as usize) < grid.dims[0] && (ny as usize) < grid.dims[1] {
                let j = grid.index([nx as usize, ny as usize]);
                if grid.cells[j] == CellState::Free {
                    next.push((j, h));
                }
            }
        }
        for (j, hh) in next {
            if sd[j * HEADINGS + hh] == usize::MAX {
                sd[j * HEADINGS + hh] = d + 1;
                q.push_back((j, hh));
            }
        }
    }
    Some(GroundTruth {
        shortest_cells: shortest,
        shortest_length: shortest as f64 * grid.cell,
        oracle_steps: oracle?,
    })
}

fn rotations(from: f64, to: f64, out: &mut Vec<Action>) {
    let n = ((wrap_angle(to - from) / TURN_ANGLE).round() as usize) % HEADINGS;
    if n <= HEADINGS / 2 {
        out.extend(std::iter::repeat(Action::RotateLeft).take(n));
    } else {
        out.extend(std::iter::repeat(Action::RotateRight).take(HEADINGS - n));
    }
}

/// Rotate-then-forward per cell transition, then optionally turn to the
/// lattice heading closest to `face`.
pub fn actions_along(path: &[Cell], heading: f64, face: Option<f64>) -> Vec<Action> {
    let mut out = Vec::new();
    let mut h = heading;
    for w in path.windows(2) {
        let dx = w[1][0] as f64 - w[0][0] as f64;
        let dy = w[1][1] as f64 - w[0][1] as f64;
        let target = dy.atan2(dx);
        rotations(h, target, &mut out);
        out.push(Action::Forward);
        h = target;
    }
    if let Some(f) = face {
        let snapped = (f / TURN_ANGLE).round() * TURN_ANGLE;
        rotations(h, snapped, &mut out);
    }
    out
}

struct Episode<'a> {
    world: &'a World,
    comps: Components<'a>,
    cfg: &'a NavConfig,
    query: Embedding,
    floor: Embedding,
    spec: GridSpec,
    belief: SceneBelief,
    free: FreeSpace,
    blocked: HashSet<Cell>,
    exhausted: HashSet<Cell>,
    rejected_goals: Vec<Vec3>,
    /// Fallback turns already spent per cell.
    scanned: HashMap<Cell, usize>,
    seed: u64,
    replans: u64,
}

const GOAL_REJECT_RADIUS: f64 = 0.75;
/// Matching primitives within this distance (m) of the localized point
/// define the goal's extent.
const GOAL_EXTENT: f64 = 2.0;

impl Episode<'_> {
    fn observe(&mut self, state: &AgentState) -> Result<(), PlannerError> {
        let (obs, log) = self.world.observe(&self.comps.sensor.pose(state), self.comps.provider)?;
        match self.belief.incorporate_observation(&obs, self.cfg.pixel_stride) {
            Ok(b) => self.belief = b,
            Err(BeliefError::EmptyObservation) => {}
            Err(e) => panic!("simulated observation rejected: {e}"),
        }
        carve_rays(&mut self.free, &log, obs.width(), self.cfg.pixel_stride);
        Ok(())
    }

    fn localize(&self) -> Option<Vec3> {
        if self.cfg.ablation == Ablation::NoGeometry {
            return None;
        }
        let rejected = &self.rejected_goals;
        localize_filtered(&self.belief, &self.query, self.cfg.min_score, |p| {
            rejected.iter().all(|r| (p - r).xy().norm() > GOAL_REJECT_RADIUS)
        })
        .map(|(p, _)| p)
    }

    fn nav_grid(&self, agent: Cell) -> Result<OccupancyGrid, PlannerError> {
        let mut grid = belief_occupancy(&self.belief, &self.free, &self.spec, self.cfg.band, &self.floor)?;
        for c in &self.blocked {
            grid.set(*c, CellState::Occupied);
        }
        let mut nav = grid;
        let band = self.cfg.band;
        let obstacles = self.belief.primitives.iter().filter_map(|p| {
            let m = p.mean();
            (m.z >= band[0] && m.z <= band[1] && p.opacity() >= OCCUPIED_OPACITY).then_some([m.x, m.y])
        });
        nav.inflate_points(obstacles, self.cfg.clearance);
        if nav.get(agent) == CellState::Occupied {
            nav.set(agent, CellState::Free);
        }
        Ok(nav)
    }

    /// Actions toward the localized goal, or `None` when no approach works.
    fn plan_goal(&self, nav: &OccupancyGrid, agent: Cell, state: &AgentState, goal: Vec3) -> Option<Vec<Action>> {
        let matched: Vec<[f64; 2]> = self
            .belief
            .primitives
            .iter()
            .filter(|p| p.opacity() * self.query.cosine(p.embedding()) >= self.cfg.min_score)
            .map(|p| [p.mean().x, p.mean().y])
            .filter(|m| (m[0] - goal.x).hypot(m[1] - goal.y) <= GOAL_EXTENT)
            .collect();
        let n = matched.len().max(1) as f64;
        let centroid = matched
            .iter()
            .fold([0.0, 0.0], |a, m| [a[0] + m[0] / n, a[1] + m[1] / n]);
        let costs = cost_field(nav, agent, self.cfg.unknown_cost);
        let mut best: Option<(f64, usize)> = None;
        for i in 0..nav.len() {
            if !costs[i].is_finite() {
                continue;
            }
            let [x, y] = nav.center(nav.cell_at(i));
            if matched.iter().any(|m| (m[0] - x).hypot(m[1] - y) <= self.cfg.goal_reach)
                && best.is_none_or(|(c, _)| costs[i] < c)
            {
                best = Some((costs[i], i));
            }
        }
        let (_, bi) = best?;
        let dest = nav.cell_at(bi);
        let (path, _) = astar(nav, agent, dest, self.cfg.unknown_cost)?;
        let [x, y] = nav.center(dest);
        let face = (centroid[1] - y).atan2(centroid[0] - x);
        let actions = actions_along(&path, state.heading, Some(face));
        (!actions.is_empty()).then_some(actions)
    }

    fn hypotheses(&self, state: &AgentState) -> Result<Vec<SceneBelief>, PlannerError> {
        let k = self.cfg.effective_k();
        if k == 0 {
            return Ok(Vec::new());
        }
        let spec = GridSpec::window(state.position[0], state.position[1], self.cfg.window, self.spec.cell);
        let cond = rasterize_observed(self.belief.observed(), spec, &self.free, self.comps.provider)?.voxels;
        let sampler = SamplerConfig {
            steps: self.cfg.sampler_steps,
        };
        let seed = mix(self.seed, self.replans);
        let samples = sample_hypotheses(&cond, k, self.comps.denoiser, self.comps.schedule, &sampler, seed)?;
        samples
            .iter()
            .map(|v| {
                self.belief
                    .replace_imagination(lift_to_gaussians(v, self.comps.provider))
                    .map_err(|e| PlannerError::InvalidConfig(e.to_string()))
            })
            .collect()
    }

    /// Up to `t_exec` actions of the best plan; `None` ends the episode.
    fn plan(&mut self, state: &AgentState) -> Result<Option<Vec<Action>>, PlannerError> {
        self.replans += 1;
        let agent = self.spec_cell(state);
        let nav = self.nav_grid(agent)?;
        while let Some(goal) = self.localize() {
            if let Some(mut a) = self.plan_goal(&nav, agent, state, goal) {
                a.truncate(self.cfg.t_exec);
                return Ok(Some(a));
            }
            self.rejected_goals.push(goal);
        }
        loop {
            let wps = match sample_waypoints(
                &nav,
                agent,
                None,
                self.cfg.waypoints,
                self.cfg.frontier_radius,
                &self.exhausted,
            ) {
                Ok(w) => w,
                Err(PlannerError::NoFrontier) => {
                    // look around once before giving up here
                    let turns = self.scanned.entry(agent).or_insert(0);
                    if *turns >= HEADINGS {
                        return Ok(None);
                    }
                    let n = self.cfg.t_exec.min(HEADINGS - *turns);
                    *turns += n;
                    return Ok(Some(vec![Action::RotateLeft; n]));
                }
                Err(e) => return Err(e),
            };
            let paths: Vec<(Cell, Vec<Cell>)> = wps
                .iter()
                .filter_map(|w| astar(&nav, agent, *w, self.cfg.unknown_cost).map(|(p, _)| (*w, p)))
                .collect();
            if paths.is_empty() {
                self.exhausted.extend(wps);
                continue;
            }
            let best = if paths.len() == 1 {
                0
            } else {
                self.best_path(&nav, state, &paths)?
            };
            let (wp, path) = &paths[best];
            let mut actions = actions_along(path, state.heading, None);
            if actions.len() <= self.cfg.t_exec {
                self.exhausted.insert(*wp);
            }
            actions.truncate(self.cfg.t_exec);
            return Ok(Some(actions));
        }
    }

    fn best_path(
        &self,
        nav: &OccupancyGrid,
        state: &AgentState,
        paths: &[(Cell, Vec<Cell>)],
    ) -> Result<usize, PlannerError> {
        let hyps = self.hypotheses(state)?;
        let sensor = self.comps.sensor;
        let template = CameraPose::level(
            Vec3::new(state.position[0], state.position[1], sensor.camera_height),
            state.heading,
            Intrinsics::from_hfov(self.cfg.render_width, self.cfg.render_height, sensor.hfov_deg),
        );
        let weights = self.cfg.weights();
        let scores: Vec<f64> = paths
            .par_iter()
            .map(|(_, path)| {
                let pts: Vec<[f64; 2]> = path.iter().map(|c| nav.center(*c)).collect();
                let rollout = if hyps.is_empty() {
                    Vec::new()
                } else {
                    mental_simulate(&hyps, &pts, &template, self.cfg.sim_stride)
                };
                score_path(&rollout, &self.query, nav, path, &weights)
            })
            .collect();
        Ok(scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |a, (i, s)| if *s > a.1 { (i, *s) } else { a })
            .0)
    }

    fn spec_cell(&self, state: &AgentState) -> Cell {
        let g = OccupancyGrid::from_spec(&self.spec, CellState::Unknown);
        g.cell_of(state.position[0], state.position[1])
            .expect("agent stays inside the world")
    }
}

/// Seed for a sub-stream; stable across platforms.
pub fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run one object-goal episode from `start`. Replans every `t_exec` actions,
/// after a collision, and when the goal first becomes localized; emits Done
/// as soon as the success test holds.
pub fn navigate(
    world: &World,
    comps: Components,
    target: &str,
    cfg: &NavConfig,
    start: AgentState,
    seed: u64,
) -> Result<EpisodeResult, PlannerError> {
    cfg.validate()?;
    if world.targets_of(target).is_empty() {
        return Err(crate::world::WorldError::UnknownTarget(target.to_string()).into());
    }
    let gt = ground_truth(world, &start, target, comps.sensor);
    let mut ep = Episode {
        world,
        comps,
        cfg,
        query: comps.provider.embed_label(target)?,
        floor: comps.provider.embed_label("floor")?,
        spec: world.grid_spec(),
        belief: SceneBelief::new(seed),
        free: FreeSpace::new(DEFAULT_CELL),
        blocked: HashSet::new(),
        exhausted: HashSet::new(),
        rejected_goals: Vec::new(),
        scanned: HashMap::new(),
        seed,
        replans: 0,
    };
    let mut state = start;
    let mut result = EpisodeResult {
        episode: 0,
        seed,
        target: target.to_string(),
        success: false,
        steps: 0,
        path_length: 0.0,
        shortest_path_length: gt.map_or(f64::INFINITY, |g| g.shortest_length),
        oracle_steps: gt.map_or(usize::MAX, |g| g.oracle_steps),
        collisions: 0,
        trace: Vec::new(),
    };
    if cfg.budget == 0 {
        return Ok(result);
    }
    ep.observe(&state)?;
    let mut queue: VecDeque<Action> = VecDeque::new();
    let mut goal_known = ep.localize().is_some();
    while result.steps < cfg.budget {
        if world.check_success(&state, target, comps.sensor)? {
            result.steps += 1;
            result.success = true;
            result.trace.push(TraceRecord::new(result.steps, Action::Done, &state, false));
            break;
        }
        if queue.is_empty() {
            match ep.plan(&state)? {
                Some(a) if !a.is_empty() => queue.extend(a),
                _ => break,
            }
        }
        let action = queue.pop_front().expect("queue refilled");
        let (next, collided) = world.step(&state, action);
        result.steps += 1;
        if collided {
            result.collisions += 1;
            let (s, c) = state.heading.sin_cos();
            let ahead = OccupancyGrid::from_spec(&ep.spec, CellState::Unknown)
                .cell_of(state.position[0] + FORWARD_STEP * c, state.position[1] + FORWARD_STEP * s);
            if let Some(cell) = ahead {
                ep.blocked.insert(cell);
            }
            queue.clear();
        } else if action == Action::Forward {
            result.path_length += FORWARD_STEP;
        }
        result.trace.push(TraceRecord::new(result.steps, action, &next, collided));
        state = next;
        ep.observe(&state)?;
        let now_known = ep.localize().is_some();
        if now_known && !goal_known {
            queue.clear();
        }
        goal_known = now_known;
    }
    Ok(result)
}

/// A batch of seeded episodes: world config, count, master seed, and the
/// minimum reference path length accepted for a start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSpec {
    pub world: WorldConfig,
    pub episodes: usize,
    pub seed: u64,
    pub min_shortest: f64,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            episodes: 10,
            seed: 0,
            min_shortest: 1.0,
        }
    }
}

const START_ATTEMPTS: usize = 100;

/// World, target and start for episode `i`.
pub fn episode_setup(spec: &EpisodeSpec, i: usize, sensor: &Sensor) -> Result<(World, String, AgentState, u64), PlannerError> {
    let ep_seed = mix(spec.seed, i as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(ep_seed);
    for attempt in 0..spec.world.max_attempts.max(1) as u64 {
        let world = World::generate(mix(ep_seed, attempt), &spec.world)?;
        let present: Vec<&String> = spec
            .world
            .targets
            .iter()
            .filter(|t| !world.targets_of(t).is_empty())
            .collect();
        if present.is_empty() {
            continue;
        }
        let target = present[rng.gen_range(0..present.len())].clone();
        for _ in 0..START_ATTEMPTS {
            let start = world.sample_start(&mut rng);
            if let Some(gt) = ground_truth(&world, &start, &target, sensor) {
                if gt.shortest_length >= spec.min_shortest {
                    return Ok((world, target, start, ep_seed));
                }
            }
        }
    }
    Err(PlannerError::InvalidConfig(format!("no valid start for episode {i}")))
}

/// Episodes in parallel; results are in episode order and independent of
/// the worker count.
pub fn run_episodes(
    spec: &EpisodeSpec,
    comps: Components,
    cfg: &NavConfig,
) -> Result<Vec<EpisodeResult>, PlannerError> {
    (0..spec.episodes)
        .into_par_iter()
        .map(|i| {
            let (world, target, start, seed) = episode_setup(spec, i, comps.sensor)?;
            let mut r = navigate(&world, comps, &target, cfg, start, seed)?;
            r.episode = i;
            Ok(r)
        })
        .collect()
}

pub const RESULT_COLUMNS: [&str; 8] = [
    "episode",
    "seed",
    "target",
    "success",
    "steps",
    "path_len",
    "shortest_len",
    "collisions",
];

pub fn write_results_csv<W: Write>(w: W, results: &[EpisodeResult]) -> io::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RESULT_COLUMNS)?;
    for r in results {
        out.write_record([
            r.episode.to_string(),
            r.seed.to_string(),
            r.target.clone(),
            (r.success as u8).to_string(),
            r.steps.to_string(),
            format!("{:.4}", r.path_length),
            format!("{:.4}", r.shortest_path_length),
            r.collisions.to_string(),
        ])?;
    }
    out.flush()
}
