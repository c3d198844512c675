//! Completion and permanence benchmark: task generation over procedural
//! worlds, belief models under test, and metric evaluation against analytic
//! ground truth.

pub mod metrics;
pub mod tasks;

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::denoiser::DenoiserParams;
use crate::diffusion::NoiseSchedule;
use crate::geometry::{CameraPose, Vec3};
use crate::hypothesis::{
    lift_to_gaussians, rasterize_observed, sample_hypotheses, FreeSpace, GridSpec, HypothesisError, SamplerConfig,
    DEFAULT_CELL,
};
use crate::planner::{belief_occupancy, carve_rays, mix, CellState, OccupancyGrid, PlannerError};
use crate::render::render;
use crate::scene::{BeliefError, Observation, SceneBelief};
use crate::semantic::{class_id, cosine, EmbeddingProvider, SemanticError, DEFAULT_MIN_SCORE};
use crate::world::{RayLog, Sensor, SolidKind, World, WorldConfig, WorldError};

pub use metrics::{
    bev_iou, box_surface, chamfer, color_histogram, directed_chamfer, embedding_cosine, iou3d, multiset_prf,
    occupancy_metrics, psnr, ssim, OccupancyMetrics, IOU_VOXEL, PSNR_CAP,
};
pub use tasks::{
    focus_grid, gen_object_completion, gen_object_permanence, gen_room_completion, is_closed, visible_fraction,
    with_occluder, CoreTask, TaskKind, VISIBILITY_TOLERANCE,
};

/// Chamfer distance reported when nothing was predicted (m).
pub const WORST_CHAMFER: f64 = crate::world::MAX_RANGE;
/// Surface sampling of ground-truth objects (m).
pub const GT_SPACING: f64 = 0.05;
/// Appearance similarity needed for the recognition rule.
pub const RECOGNITION_THRESHOLD: f64 = 0.8;
pub const RECOGNITION_MIN_IOU: f64 = 0.1;
const GEN_ATTEMPTS: u64 = 8;
/// Classes that never count as objects in room completion.
const STRUCTURE: [&str; 4] = ["wall", "floor", "door", "panel"];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("visibility {0} outside [0, 1]")]
    InvalidVisibility(f64),
    #[error("no pose reaches visibility {0} within the search budget")]
    VisibilityUnachievable(f64),
    #[error("no primitive matched the target")]
    NothingPredicted,
    #[error("trajectory does not return to its first pose")]
    TrajectoryNotClosed,
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Belief(#[from] BeliefError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
    #[error("task file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub world: WorldConfig,
    pub sensor: Sensor,
    pub seed: u64,
    /// Object completion tasks per visibility level.
    pub object_tasks: usize,
    pub visibilities: Vec<f64>,
    pub room_tasks: usize,
    pub permanence_tasks: usize,
    pub pixel_stride: usize,
    /// Side of the imagination window around objects, in cells.
    pub window: usize,
    pub band: [f64; 2],
    pub match_cosine: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            sensor: Sensor::default(),
            seed: 0,
            object_tasks: 4,
            visibilities: vec![0.05, 0.55, 0.95],
            room_tasks: 4,
            permanence_tasks: 4,
            pixel_stride: 1,
            window: 16,
            band: [0.125, 1.8],
            match_cosine: DEFAULT_MIN_SCORE,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        self.world.validate()?;
        if let Some(v) = self.visibilities.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(BenchError::InvalidVisibility(*v));
        }
        if self.pixel_stride == 0 || self.window == 0 {
            return Err(BenchError::InvalidConfig("pixel_stride and window must be positive".into()));
        }
        if !(self.band[0] < self.band[1]) {
            return Err(BenchError::InvalidConfig(format!("band {:?}", self.band)));
        }
        Ok(())
    }
}

/// Belief plus carved free space accumulated by a model.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub belief: SceneBelief,
    pub free: FreeSpace,
}

impl ModelState {
    pub fn new(seed: u64) -> Self {
        Self {
            belief: SceneBelief::new(seed),
            free: FreeSpace::new(DEFAULT_CELL),
        }
    }

    /// Lift the observation into observed primitives and carve its rays.
    pub fn absorb(&mut self, obs: &Observation, log: &RayLog, stride: usize) -> Result<(), BenchError> {
        match self.belief.incorporate_observation(obs, stride) {
            Ok(b) => self.belief = b,
            Err(BeliefError::EmptyObservation) => {}
            Err(e) => return Err(e.into()),
        }
        carve_rays(&mut self.free, log, obs.width(), stride);
        Ok(())
    }
}

/// A scene model under evaluation: it absorbs observations and produces a
/// completed belief for a region on demand.
pub trait BeliefModel: Sync {
    fn name(&self) -> &str;

    fn update(&self, state: &mut ModelState, obs: &Observation, log: &RayLog, stride: usize) -> Result<(), BenchError> {
        state.absorb(obs, log, stride)
    }

    fn complete(&self, state: &ModelState, focus: &GridSpec, seed: u64) -> Result<SceneBelief, BenchError>;
}

/// Observed primitives only; no imagination.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObservedOnly;

impl BeliefModel for ObservedOnly {
    fn name(&self) -> &str {
        "observed_only"
    }

    fn complete(&self, state: &ModelState, _focus: &GridSpec, _seed: u64) -> Result<SceneBelief, BenchError> {
        Ok(state.belief.observed_only())
    }
}

/// Keeps only the first observation it is given and ignores the rest.
#[derive(Clone, Copy, Debug, Default)]
pub struct StaticBelief;

impl BeliefModel for StaticBelief {
    fn name(&self) -> &str {
        "static"
    }

    fn update(&self, state: &mut ModelState, obs: &Observation, log: &RayLog, stride: usize) -> Result<(), BenchError> {
        if state.belief.step == 0 {
            state.absorb(obs, log, stride)?;
        }
        Ok(())
    }

    fn complete(&self, state: &ModelState, _focus: &GridSpec, _seed: u64) -> Result<SceneBelief, BenchError> {
        Ok(state.belief.observed_only())
    }
}

/// Observed primitives plus one sampled completion of the focus window.
#[derive(Clone, Copy)]
pub struct Generative<'a> {
    pub denoiser: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
    pub provider: &'a EmbeddingProvider,
    pub sampler_steps: usize,
}

impl BeliefModel for Generative<'_> {
    fn name(&self) -> &str {
        "generative"
    }

    fn complete(&self, state: &ModelState, focus: &GridSpec, seed: u64) -> Result<SceneBelief, BenchError> {
        let cond = rasterize_observed(state.belief.observed(), *focus, &state.free, self.provider)?.voxels;
        let sampler = SamplerConfig {
            steps: self.sampler_steps,
        };
        let sample = sample_hypotheses(&cond, 1, self.denoiser, self.schedule, &sampler, seed)?;
        Ok(state.belief.replace_imagination(lift_to_gaussians(&sample[0], self.provider))?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectMetrics {
    pub bev_iou: f64,
    pub iou3d: f64,
    pub chamfer: f64,
    pub appearance_sim: f64,
    pub recognized: bool,
}

impl ObjectMetrics {
    pub fn worst() -> Self {
        Self {
            bev_iou: 0.0,
            iou3d: 0.0,
            chamfer: WORST_CHAMFER,
            appearance_sim: 0.0,
            recognized: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoomMetrics {
    pub obj_precision: f64,
    pub obj_recall: f64,
    pub obj_f1: f64,
    pub occupancy: OccupancyMetrics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PermanenceMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub embed_cos: f64,
}

fn poses(sensor: &Sensor, states: &[crate::world::AgentState]) -> Vec<CameraPose> {
    states.iter().map(|s| sensor.pose(s)).collect()
}

/// Pixels whose first hit is furniture `target`.
fn target_mask(world: &World, target: usize, pose: &CameraPose) -> Vec<bool> {
    let (w, h) = (pose.intrinsics.width, pose.intrinsics.height);
    (0..w * h)
        .map(|i| {
            let dir = pose.pixel_direction((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            world
                .raycast(&pose.position, &dir, f64::INFINITY)
                .and_then(|hit| hit.solid)
                .is_some_and(|s| world.solids[s].kind == SolidKind::Furniture(target))
        })
        .collect()
}

/// Ground-truth surface points of furniture `target` (bottom face omitted when
/// it rests on the floor).
pub fn object_points(world: &World, target: usize) -> Vec<Vec3> {
    let b = world.furniture[target].aabb;
    box_surface(b.min, b.max, GT_SPACING, b.min[2] <= 1e-9)
}

/// Means of primitives matching the target class inside the doubled target
/// box.
pub fn matched_points(
    world: &World,
    target: usize,
    predicted: &SceneBelief,
    provider: &EmbeddingProvider,
    min_cosine: f64,
) -> Result<Vec<Vec3>, BenchError> {
    let f = &world.furniture[target];
    let query = provider.embed_label(&f.class)?;
    let region = f.aabb.scaled(2.0);
    Ok(predicted
        .primitives
        .iter()
        .filter(|p| region.contains(p.mean()) && query.cosine(p.embedding()) >= min_cosine)
        .map(|p| *p.mean())
        .collect())
}

/// Object completion metrics of `predicted` on the task's target.
pub fn eval_object_completion(
    task: &CoreTask,
    world: &World,
    predicted: &SceneBelief,
    provider: &EmbeddingProvider,
    cfg: &BenchConfig,
) -> Result<ObjectMetrics, BenchError> {
    let target = task
        .target
        .ok_or_else(|| BenchError::InvalidTask("object task without target".into()))?;
    let pred = matched_points(world, target, predicted, provider, cfg.match_cosine)?;
    if pred.is_empty() {
        return Err(BenchError::NothingPredicted);
    }
    let gt = object_points(world, target);
    let iou = iou3d(&pred, &gt, IOU_VOXEL);
    let appearance_sim = appearance_similarity(world, target, predicted, &poses(&cfg.sensor, &task.trajectory), provider)?;
    Ok(ObjectMetrics {
        bev_iou: bev_iou(&pred, &gt, IOU_VOXEL),
        iou3d: iou,
        chamfer: chamfer(&pred, &gt).expect("both sets non-empty"),
        appearance_sim,
        recognized: appearance_sim >= RECOGNITION_THRESHOLD && iou >= RECOGNITION_MIN_IOU,
    })
}

/// Cosine between the summed color histograms of predicted and ground-truth
/// renders over the target's pixels. Falls back to whole images when the
/// target is hidden in every view.
pub fn appearance_similarity(
    world: &World,
    target: usize,
    predicted: &SceneBelief,
    views: &[CameraPose],
    provider: &EmbeddingProvider,
) -> Result<f64, BenchError> {
    let masks: Vec<Vec<bool>> = views.iter().map(|p| target_mask(world, target, p)).collect();
    let any = masks.iter().any(|m| m.iter().any(|v| *v));
    let mut gt = vec![0.0; 3 * metrics::HIST_BINS];
    let mut pr = gt.clone();
    for (pose, mask) in views.iter().zip(&masks) {
        let mask = if any { mask.clone() } else { vec![true; mask.len()] };
        let (obs, _) = world.observe(pose, provider)?;
        let ren = render(predicted, pose);
        for (acc, h) in [(&mut gt, color_histogram(&obs.rgb, &mask)), (&mut pr, color_histogram(&ren.rgb, &mask))] {
            acc.iter_mut().zip(h).for_each(|(a, v)| *a += v);
        }
    }
    Ok(cosine(&gt, &pr))
}

/// Analytic navigation-plane grid: Occupied where any solid reaching into
/// the height band overlaps the cell footprint, Free elsewhere.
pub fn truth_occupancy(world: &World, spec: &GridSpec, band: [f64; 2]) -> OccupancyGrid {
    let mut grid = OccupancyGrid::from_spec(spec, CellState::Free);
    let half = spec.cell / 2.0;
    for y in 0..spec.dims[1] {
        for x in 0..spec.dims[0] {
            let [cx, cy] = grid.center([x, y]);
            let (lo, hi) = ([cx - half, cy - half], [cx + half, cy + half]);
            let hit = world
                .solids
                .iter()
                .any(|s| s.aabb.z_overlaps(band[0], band[1]) && s.aabb.footprint_overlaps(lo, hi));
            if hit {
                grid.set([x, y], CellState::Occupied);
            }
        }
    }
    grid
}

/// Object instances in a predicted grid: 4-connected components of Occupied
/// cells sharing the same dominant primitive class, structure classes
/// excluded. Returns one class id per component.
pub fn extract_objects(
    grid: &OccupancyGrid,
    belief: &SceneBelief,
    band: [f64; 2],
    provider: &EmbeddingProvider,
    min_cosine: f64,
) -> Vec<u8> {
    let mut votes: Vec<BTreeMap<u8, usize>> = vec![BTreeMap::new(); grid.len()];
    for p in &belief.primitives {
        let m = p.mean();
        if m.z < band[0] || m.z > band[1] || p.opacity() < crate::planner::OCCUPIED_OPACITY {
            continue;
        }
        let Some(c) = grid.cell_of(m.x, m.y) else {
            continue;
        };
        if let Some((cls, cos)) = provider.classify(p.embedding()) {
            if cos >= min_cosine {
                *votes[grid.index(c)].entry(cls).or_insert(0) += 1;
            }
        }
    }
    let structure: Vec<u8> = STRUCTURE.iter().filter_map(|n| class_id(n)).collect();
    let label: Vec<Option<u8>> = (0..grid.len())
        .map(|i| {
            if grid.cells[i] != CellState::Occupied {
                return None;
            }
            // BTreeMap iterates by class id, so ties go to the lowest id
            let best = votes[i].iter().fold(None, |b: Option<(u8, usize)>, (&k, &n)| match b {
                Some((_, bn)) if bn >= n => b,
                _ => Some((k, n)),
            });
            best.map(|(k, _)| k).filter(|k| !structure.contains(k))
        })
        .collect();
    let mut seen = vec![false; grid.len()];
    let mut out = Vec::new();
    for start in 0..grid.len() {
        let Some(cls) = label[start] else {
            continue;
        };
        if seen[start] {
            continue;
        }
        out.push(cls);
        seen[start] = true;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for n in grid.neighbors4(grid.cell_at(i)) {
                let j = grid.index(n);
                if !seen[j] && label[j] == Some(cls) {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    out
}

/// Room completion metrics of `predicted` over the target room.
pub fn eval_room_completion(
    task: &CoreTask,
    world: &World,
    predicted: &SceneBelief,
    free: &FreeSpace,
    provider: &EmbeddingProvider,
    cfg: &BenchConfig,
) -> Result<RoomMetrics, BenchError> {
    let room = task
        .target
        .ok_or_else(|| BenchError::InvalidTask("room task without room".into()))?;
    let spec = focus_grid(task, world, cfg.window);
    let floor = provider.embed_label("floor")?;
    let pred = belief_occupancy(predicted, free, &spec, cfg.band, &floor)?;
    let gt = truth_occupancy(world, &spec, cfg.band);
    let occupancy = occupancy_metrics(&pred, &gt);
    let found = extract_objects(&pred, predicted, cfg.band, provider, cfg.match_cosine);
    let structure: Vec<u8> = STRUCTURE.iter().filter_map(|n| class_id(n)).collect();
    let truth: Vec<u8> = world
        .furniture
        .iter()
        .filter(|f| f.room == room)
        .filter_map(|f| class_id(&f.class))
        .filter(|c| !structure.contains(c))
        .collect();
    let (obj_precision, obj_recall, obj_f1) = multiset_prf(&found, &truth);
    Ok(RoomMetrics {
        obj_precision,
        obj_recall,
        obj_f1,
        occupancy,
    })
}

/// Roll `model` along the closed trajectory with an update at every pose and
/// compare its renders at the first pose before and after the loop.
pub fn eval_object_permanence(
    task: &CoreTask,
    world: &World,
    model: &dyn BeliefModel,
    provider: &EmbeddingProvider,
    cfg: &BenchConfig,
) -> Result<PermanenceMetrics, BenchError> {
    if !is_closed(&task.trajectory) {
        return Err(BenchError::TrajectoryNotClosed);
    }
    let views = poses(&cfg.sensor, &task.trajectory);
    let focus = focus_grid(task, world, cfg.window);
    let mut state = ModelState::new(task.seed);
    let mut before = None;
    for (i, pose) in views.iter().enumerate() {
        let (obs, log) = world.observe(pose, provider)?;
        model.update(&mut state, &obs, &log, cfg.pixel_stride)?;
        if i == 0 {
            let b = model.complete(&state, &focus, mix(task.seed, 0))?;
            before = Some(render(&b, pose));
        }
    }
    let after_belief = model.complete(&state, &focus, mix(task.seed, views.len() as u64))?;
    let after = render(&after_belief, views.last().unwrap());
    let before = before.expect("trajectory is non-empty");
    Ok(PermanenceMetrics {
        psnr: psnr(&before.rgb, &after.rgb),
        ssim: ssim(&before.rgb, &after.rgb),
        embed_cos: embedding_cosine(&before.semantic, &after.semantic),
    })
}

/// Whole task set for a config. Tasks come in the order object completion
/// (grouped by visibility level), room completion, object permanence, with
/// ids assigned in that order.
pub fn generate_tasks(cfg: &BenchConfig) -> Result<Vec<CoreTask>, BenchError> {
    cfg.validate()?;
    #[derive(Clone, Copy)]
    enum Job {
        Object(f64),
        Room,
        Permanence,
    }
    let mut jobs = Vec::new();
    for v in &cfg.visibilities {
        jobs.extend(std::iter::repeat(Job::Object(*v)).take(cfg.object_tasks));
    }
    jobs.extend(std::iter::repeat(Job::Room).take(cfg.room_tasks));
    jobs.extend(std::iter::repeat(Job::Permanence).take(cfg.permanence_tasks));
    let made: Vec<Result<CoreTask, BenchError>> = jobs
        .par_iter()
        .enumerate()
        .map(|(i, job)| {
            let base = mix(cfg.seed, i as u64);
            let mut last = None;
            for a in 0..GEN_ATTEMPTS {
                let seed = mix(base, a);
                let world = World::generate(seed, &cfg.world)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let made = match job {
                    Job::Object(v) => {
                        let mut ids: Vec<usize> = (0..world.furniture.len()).collect();
                        ids.shuffle(&mut rng);
                        let mut r = Err(BenchError::VisibilityUnachievable(*v));
                        for id in ids {
                            r = gen_object_completion(&world, id, *v, &cfg.sensor, mix(seed, id as u64));
                            if r.is_ok() {
                                break;
                            }
                        }
                        r
                    }
                    Job::Room => {
                        let room = rand::Rng::gen_range(&mut rng, 0..world.rooms.len());
                        gen_room_completion(&world, room, seed)
                    }
                    Job::Permanence => gen_object_permanence(&world, &cfg.sensor, seed),
                };
                match made {
                    Ok(t) => return Ok(t),
                    Err(e) => last = Some(e),
                }
            }
            Err(last.expect("at least one attempt"))
        })
        .collect();
    made.into_iter()
        .enumerate()
        .map(|(i, t)| t.map(|t| CoreTask { id: i, ..t }))
        .collect()
}

/// Task-set file contents: the config the tasks were generated under plus
/// the tasks themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSet {
    pub config: BenchConfig,
    pub tasks: Vec<CoreTask>,
}

impl TaskSet {
    pub fn write_to<W: Write>(&self, w: W) -> Result<(), BenchError> {
        serde_json::to_writer_pretty(w, self).map_err(|e| BenchError::Format(e.to_string()))
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self, BenchError> {
        let set: TaskSet = serde_json::from_reader(r).map_err(|e| BenchError::Format(e.to_string()))?;
        set.config.validate()?;
        for t in &set.tasks {
            t.validate()?;
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskMetrics {
    Object(ObjectMetrics),
    Room(RoomMetrics),
    Permanence(PermanenceMetrics),
}

/// One result row. `status` is "ok", "nothing_predicted" (worst metrics), or
/// "error: ..." with no metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskRow {
    pub id: usize,
    pub kind: TaskKind,
    pub world_seed: u64,
    pub status: String,
    pub metrics: Option<TaskMetrics>,
}

pub const BENCH_COLUMNS: [&str; 20] = [
    "task",
    "kind",
    "visibility",
    "world_seed",
    "status",
    "bev_iou",
    "iou3d",
    "chamfer",
    "appearance_sim",
    "recognized",
    "obj_precision",
    "obj_recall",
    "obj_f1",
    "occ_acc",
    "iou_free",
    "iou_occ",
    "occ_iou",
    "psnr",
    "ssim",
    "embed_cos",
];

/// Evaluate one task end to end.
pub fn run_task(task: &CoreTask, model: &dyn BeliefModel, provider: &EmbeddingProvider, cfg: &BenchConfig) -> TaskRow {
    let row = |status: String, metrics| TaskRow {
        id: task.id,
        kind: task.kind,
        world_seed: task.world_seed,
        status,
        metrics,
    };
    match evaluate(task, model, provider, cfg) {
        Ok(m) => row("ok".into(), Some(m)),
        Err(BenchError::NothingPredicted) => row("nothing_predicted".into(), Some(TaskMetrics::Object(ObjectMetrics::worst()))),
        Err(e) => row(format!("error: {e}"), None),
    }
}

fn evaluate(
    task: &CoreTask,
    model: &dyn BeliefModel,
    provider: &EmbeddingProvider,
    cfg: &BenchConfig,
) -> Result<TaskMetrics, BenchError> {
    task.validate()?;
    let world = task.world(&cfg.world)?;
    if task.kind == TaskKind::ObjectPermanence {
        return eval_object_permanence(task, &world, model, provider, cfg).map(TaskMetrics::Permanence);
    }
    let mut state = ModelState::new(task.seed);
    for pose in poses(&cfg.sensor, &task.initial) {
        let (obs, log) = world.observe(&pose, provider)?;
        model.update(&mut state, &obs, &log, cfg.pixel_stride)?;
    }
    let focus = focus_grid(task, &world, cfg.window);
    let belief = model.complete(&state, &focus, task.seed)?;
    match task.kind {
        TaskKind::ObjectCompletion { .. } => {
            eval_object_completion(task, &world, &belief, provider, cfg).map(TaskMetrics::Object)
        }
        _ => eval_room_completion(task, &world, &belief, &state.free, provider, cfg).map(TaskMetrics::Room),
    }
}

/// Evaluate every task (in parallel, results in task order).
pub fn evaluate_tasks(
    tasks: &[CoreTask],
    model: &dyn BeliefModel,
    provider: &EmbeddingProvider,
    cfg: &BenchConfig,
) -> Vec<TaskRow> {
    tasks.par_iter().map(|t| run_task(t, model, provider, cfg)).collect()
}

fn metric_values(m: &TaskMetrics) -> [Option<f64>; 15] {
    let mut v = [None; 15];
    match m {
        TaskMetrics::Object(o) => {
            v[0] = Some(o.bev_iou);
            v[1] = Some(o.iou3d);
            v[2] = Some(o.chamfer);
            v[3] = Some(o.appearance_sim);
            v[4] = Some(f64::from(u8::from(o.recognized)));
        }
        TaskMetrics::Room(r) => {
            v[5] = Some(r.obj_precision);
            v[6] = Some(r.obj_recall);
            v[7] = Some(r.obj_f1);
            v[8] = Some(r.occupancy.occ_acc);
            v[9] = Some(r.occupancy.iou_free);
            v[10] = Some(r.occupancy.iou_occ);
            v[11] = Some(r.occupancy.occ_iou);
        }
        TaskMetrics::Permanence(p) => {
            v[12] = Some(p.psnr);
            v[13] = Some(p.ssim);
            v[14] = Some(p.embed_cos);
        }
    }
    v
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

/// Write per-task rows followed by one mean row per task kind present
/// (averaged over rows that carry metrics).
pub fn write_suite_csv<W: Write>(w: W, rows: &[TaskRow]) -> Result<(), BenchError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(BENCH_COLUMNS)?;
    for r in rows {
        let vis = match r.kind {
            TaskKind::ObjectCompletion { visibility } => format!("{visibility:.2}"),
            _ => String::new(),
        };
        let vals = r.metrics.as_ref().map_or([None; 15], metric_values);
        let mut rec = vec![r.id.to_string(), r.kind.label().into(), vis, r.world_seed.to_string(), r.status.clone()];
        rec.extend(vals.iter().map(|v| fmt(*v)));
        out.write_record(&rec)?;
    }
    for kind in ["object_completion", "room_completion", "object_permanence"] {
        let vals: Vec<[Option<f64>; 15]> = rows
            .iter()
            .filter(|r| r.kind.label() == kind)
            .filter_map(|r| r.metrics.as_ref().map(metric_values))
            .collect();
        if vals.is_empty() {
            continue;
        }
        let mut rec = vec!["mean".to_string(), kind.into(), String::new(), String::new(), format!("n={}", vals.len())];
        for c in 0..15 {
            let col: Vec<f64> = vals.iter().filter_map(|v| v[c]).collect();
            rec.push(if col.is_empty() { String::new() } else { fmt(Some(col.iter().sum::<f64>() / col.len() as f64)) });
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Evaluate a task set and write the results table.
pub fn run_suite<W: Write>(
    tasks: &[CoreTask],
    model: &dyn BeliefModel,
    provider: &EmbeddingProvider,
    cfg: &BenchConfig,
    out: W,
) -> Result<Vec<TaskRow>, BenchError> {
    let rows = evaluate_tasks(tasks, model, provider, cfg);
    write_suite_csv(out, &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests;
