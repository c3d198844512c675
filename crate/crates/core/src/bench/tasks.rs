//! Task records and their generators.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::geometry::{wrap_angle, Aabb, CameraPose, Vec3};
use crate::hypothesis::GridSpec;
use crate::world::{Action, AgentState, Furniture, Sensor, SolidKind, World, WorldConfig, MAX_RANGE, TURN_ANGLE};

/// Accepted deviation between requested and achieved visibility.
pub const VISIBILITY_TOLERANCE: f64 = 0.05;
/// Supersampling factor of the visibility measurement relative to the sensor.
pub const VISIBILITY_SUPERSAMPLE: usize = 2;
/// Minimum number of supersampled silhouette pixels for a usable view.
const MIN_SILHOUETTE: usize = 40;
const POSE_CANDIDATES: usize = 40;
const BISECTION_STEPS: usize = 40;
const PANEL_THICKNESS: f64 = 0.04;
const PANEL_HEIGHT: f64 = 2.2;
const VIEW_DISTANCE: [f64; 2] = [0.6, 4.0];
const ORBIT_DISTANCE: f64 = 1.5;
const CLOSURE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TaskKind {
    ObjectCompletion { visibility: f64 },
    RoomCompletion,
    ObjectPermanence,
}

impl TaskKind {
    pub fn label(&self) -> &'static str {
        match self {
            TaskKind::ObjectCompletion { .. } => "object_completion",
            TaskKind::RoomCompletion => "room_completion",
            TaskKind::ObjectPermanence => "object_permanence",
        }
    }
}

/// One benchmark task. Poses are agent states; the camera follows from the
/// suite's sensor. The world is `World::generate(world_seed, config)` plus the
/// optional occluder panel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoreTask {
    pub id: usize,
    pub kind: TaskKind,
    pub world_seed: u64,
    /// Seed for any sampling the evaluated model does on this task.
    pub seed: u64,
    pub initial: Vec<AgentState>,
    pub trajectory: Vec<AgentState>,
    /// Furniture index for object tasks, room index for room tasks.
    pub target: Option<usize>,
    pub occluder: Option<Aabb>,
}

impl CoreTask {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.initial.is_empty() || self.trajectory.is_empty() {
            return Err(BenchError::InvalidTask(format!("task {} has no poses", self.id)));
        }
        if let TaskKind::ObjectCompletion { visibility } = self.kind {
            check_visibility(visibility)?;
        }
        if self.kind == TaskKind::ObjectPermanence && !is_closed(&self.trajectory) {
            return Err(BenchError::TrajectoryNotClosed);
        }
        if matches!(self.kind, TaskKind::ObjectCompletion { .. } | TaskKind::RoomCompletion) && self.target.is_none() {
            return Err(BenchError::InvalidTask(format!("task {} has no target", self.id)));
        }
        Ok(())
    }

    /// Rebuild the task's world.
    pub fn world(&self, config: &WorldConfig) -> Result<World, BenchError> {
        let w = World::generate(self.world_seed, config)?;
        Ok(match self.occluder {
            Some(b) => with_occluder(&w, b),
            None => w,
        })
    }
}

/// Both poses at the same place and heading (headings compared on the circle).
pub fn same_pose(a: &AgentState, b: &AgentState) -> bool {
    let dh = wrap_angle(a.heading - b.heading);
    let dh = dh.min(std::f64::consts::TAU - dh);
    (a.position[0] - b.position[0]).abs() <= CLOSURE_TOLERANCE
        && (a.position[1] - b.position[1]).abs() <= CLOSURE_TOLERANCE
        && dh <= CLOSURE_TOLERANCE
}

pub fn is_closed(traj: &[AgentState]) -> bool {
    match (traj.first(), traj.last()) {
        (Some(a), Some(b)) => same_pose(a, b),
        _ => false,
    }
}

fn check_visibility(v: f64) -> Result<(), BenchError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(BenchError::InvalidVisibility(v))
    }
}

/// Copy of `world` with a free-standing panel added as extra furniture.
pub fn with_occluder(world: &World, panel: Aabb) -> World {
    let mut furniture = world.furniture.clone();
    let room = world.room_of(panel.center().x, panel.center().y).unwrap_or(0);
    furniture.push(Furniture {
        class: "panel".into(),
        aabb: panel,
        color: crate::semantic::class_color(crate::semantic::class_id("panel").unwrap()),
        room,
    });
    World::from_parts(world.seed, world.config.clone(), world.rooms.clone(), world.doors.clone(), furniture)
}

/// Fraction of the target's in-frame silhouette whose first hit is the
/// target, sampled on a grid [`VISIBILITY_SUPERSAMPLE`] times finer than the
/// sensor. Also returns the silhouette size in samples.
pub fn visible_fraction(world: &World, target: usize, pose: &CameraPose) -> (f64, usize) {
    let aabb = world.furniture[target].aabb;
    let s = VISIBILITY_SUPERSAMPLE;
    let (w, h) = (pose.intrinsics.width * s, pose.intrinsics.height * s);
    let mut silhouette = 0usize;
    let mut visible = 0usize;
    for r in 0..h {
        for c in 0..w {
            let dir = pose.pixel_direction((c as f64 + 0.5) / s as f64, (r as f64 + 0.5) / s as f64);
            let Some((t, _)) = aabb.ray_hit(&pose.position, &dir, 1e-9) else {
                continue;
            };
            if t * dir.norm() > MAX_RANGE {
                continue;
            }
            silhouette += 1;
            let first = world.raycast(&pose.position, &dir, f64::INFINITY);
            if first.is_some_and(|hit| {
                hit.solid.is_some_and(|i| world.solids[i].kind == SolidKind::Furniture(target))
            }) {
                visible += 1;
            }
        }
    }
    let frac = if silhouette == 0 { 0.0 } else { visible as f64 / silhouette as f64 };
    (frac, silhouette)
}

fn box_in_frame(aabb: &Aabb, pose: &CameraPose) -> bool {
    let k = &pose.intrinsics;
    (0..8).all(|i| {
        let p = Vec3::new(
            if i & 1 == 0 { aabb.min[0] } else { aabb.max[0] },
            if i & 2 == 0 { aabb.min[1] } else { aabb.max[1] },
            if i & 4 == 0 { aabb.min[2] } else { aabb.max[2] },
        );
        pose.project(&p)
            .is_some_and(|(u, v, _)| u >= 0.0 && u <= k.width as f64 && v >= 0.0 && v <= k.height as f64)
    })
}

fn lattice_cells(world: &World) -> Vec<[f64; 2]> {
    let spec = world.grid_spec();
    let mut out = Vec::new();
    for y in 0..spec.dims[1] {
        for x in 0..spec.dims[0] {
            let c = spec.center(x, y, 0);
            if !world.collides(c.x, c.y) {
                out.push([c.x, c.y]);
            }
        }
    }
    out
}

fn facing(from: [f64; 2], to: &Vec3) -> f64 {
    wrap_angle((to.y - from[1]).atan2(to.x - from[0]))
}

/// Vertical panel between the camera and the target, normal to the dominant
/// axis of the viewing direction, spanning `[edge, far]` laterally.
fn panel(eye: &Vec3, target: &Aabb, edge: f64, sign: f64, room: &crate::world::Room) -> Aabb {
    let c = target.center();
    let d = c - eye;
    let normal = if d.x.abs() >= d.y.abs() { 0 } else { 1 };
    let lateral = 1 - normal;
    // halfway between the eye and the target's near face
    let near = if d[normal] > 0.0 { target.min[normal] } else { target.max[normal] };
    let at = 0.5 * (eye[normal] + near);
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    min[normal] = at - PANEL_THICKNESS / 2.0;
    max[normal] = at + PANEL_THICKNESS / 2.0;
    let (lo, hi) = (room.min[lateral], room.max[lateral]);
    if sign > 0.0 {
        min[lateral] = edge.clamp(lo, hi);
        max[lateral] = hi;
    } else {
        min[lateral] = lo;
        max[lateral] = edge.clamp(lo, hi);
    }
    max[2] = PANEL_HEIGHT;
    Aabb::new(min, max)
}

/// Object completion task on furniture `target`. Searches camera poses in the
/// target's room and, when the bare view is too visible, slides an occluder
/// panel across the line of sight until the measured visible fraction is
/// within [`VISIBILITY_TOLERANCE`] of `visibility`.
pub fn gen_object_completion(
    world: &World,
    target: usize,
    visibility: f64,
    sensor: &Sensor,
    seed: u64,
) -> Result<CoreTask, BenchError> {
    check_visibility(visibility)?;
    let f = world
        .furniture
        .get(target)
        .ok_or_else(|| BenchError::InvalidTask(format!("no furniture {target}")))?;
    let aabb = f.aabb;
    let center = aabb.center();
    let room = world.rooms[f.room];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cands: Vec<[f64; 2]> = lattice_cells(world)
        .into_iter()
        .filter(|p| world.room_of(p[0], p[1]) == Some(f.room))
        .filter(|p| {
            let d = aabb.footprint_distance(p[0], p[1]);
            d >= VIEW_DISTANCE[0] && d <= VIEW_DISTANCE[1]
        })
        .collect();
    cands.shuffle(&mut rng);
    for pos in cands.into_iter().take(POSE_CANDIDATES) {
        let state = AgentState {
            position: pos,
            heading: facing(pos, &center),
        };
        let pose = sensor.pose(&state);
        if !box_in_frame(&aabb, &pose) {
            continue;
        }
        let (bare, sil) = visible_fraction(world, target, &pose);
        if sil < MIN_SILHOUETTE || bare < visibility - VISIBILITY_TOLERANCE {
            continue;
        }
        let mut occluder = None;
        if bare > visibility + VISIBILITY_TOLERANCE {
            occluder = place_occluder(world, target, &pose, visibility, &room, &mut rng);
            if occluder.is_none() {
                continue;
            }
        }
        let scene = occluder.map_or_else(|| world.clone(), |b| with_occluder(world, b));
        let trajectory = orbit(&scene, &center, state);
        return Ok(CoreTask {
            id: 0,
            kind: TaskKind::ObjectCompletion { visibility },
            world_seed: world.seed,
            seed,
            initial: vec![state],
            trajectory,
            target: Some(target),
            occluder,
        });
    }
    Err(BenchError::VisibilityUnachievable(visibility))
}

fn place_occluder(
    world: &World,
    target: usize,
    pose: &CameraPose,
    visibility: f64,
    room: &crate::world::Room,
    rng: &mut impl Rng,
) -> Option<Aabb> {
    let aabb = world.furniture[target].aabb;
    let eye = pose.position;
    let d = aabb.center() - eye;
    let lateral = if d.x.abs() >= d.y.abs() { 1 } else { 0 };
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let measure = |edge: f64| {
        let p = panel(&eye, &aabb, edge, sign, room);
        if p.contains(&eye) || p.footprint_distance(eye.x, eye.y) < 0.05 {
            return None;
        }
        Some((visible_fraction(&with_occluder(world, p), target, pose).0, p))
    };
    // Panel covering [edge, far] for sign > 0: visibility grows with edge.
    let (mut lo, mut hi) = (room.min[lateral], room.max[lateral]);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let (v, p) = measure(mid)?;
        if (v - visibility).abs() <= VISIBILITY_TOLERANCE * 0.8 {
            return Some(p);
        }
        let too_visible = v > visibility;
        if too_visible == (sign > 0.0) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    None
}

/// Up to four views around the object at [`ORBIT_DISTANCE`], each looking at
/// its center; the initial pose when none is collision-free.
fn orbit(world: &World, center: &Vec3, initial: AgentState) -> Vec<AgentState> {
    let base = facing(initial.position, center) + std::f64::consts::PI;
    let mut out: Vec<AgentState> = (0..4)
        .map(|i| base + i as f64 * std::f64::consts::FRAC_PI_2)
        .map(|a| [center.x + ORBIT_DISTANCE * a.cos(), center.y + ORBIT_DISTANCE * a.sin()])
        .filter(|p| !world.collides(p[0], p[1]))
        .map(|p| AgentState {
            position: p,
            heading: facing(p, center),
        })
        .collect();
    if out.is_empty() {
        out.push(initial);
    }
    out
}

/// Room completion task: one view into room `room` from a random free cell
/// inside it, turned toward the room center. The trajectory turns a full
/// circle at the same cell in quarter steps.
pub fn gen_room_completion(world: &World, room: usize, seed: u64) -> Result<CoreTask, BenchError> {
    let r = *world
        .rooms
        .get(room)
        .ok_or_else(|| BenchError::InvalidTask(format!("no room {room}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells: Vec<[f64; 2]> = lattice_cells(world)
        .into_iter()
        .filter(|p| world.room_of(p[0], p[1]) == Some(room))
        .collect();
    let pos = *cells
        .choose(&mut rng)
        .ok_or_else(|| BenchError::InvalidTask(format!("room {room} has no free cell")))?;
    let center = Vec3::new((r.min[0] + r.max[0]) / 2.0, (r.min[1] + r.max[1]) / 2.0, 0.0);
    let heading = if (center.xy() - nalgebra::Vector2::new(pos[0], pos[1])).norm() < 1e-9 {
        0.0
    } else {
        facing(pos, &center)
    };
    let start = AgentState { position: pos, heading };
    let trajectory = (0..4)
        .map(|i| AgentState {
            position: pos,
            heading: wrap_angle(heading + i as f64 * std::f64::consts::FRAC_PI_2),
        })
        .collect();
    Ok(CoreTask {
        id: 0,
        kind: TaskKind::RoomCompletion,
        world_seed: world.seed,
        seed,
        initial: vec![start],
        trajectory,
        target: Some(room),
        occluder: None,
    })
}

/// Object permanence task: turn around, walk away `n` steps, turn back, and
/// walk the same `n` steps home, so the last pose repeats the first. Falls
/// back to a full turn in place when no walk is collision-free.
pub fn gen_object_permanence(world: &World, sensor: &Sensor, seed: u64) -> Result<CoreTask, BenchError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = world.sample_start(&mut rng);
    let half_turn = (std::f64::consts::PI / TURN_ANGLE).round() as usize;
    let mut trajectory = None;
    for n in (1..=4).rev() {
        let mut plan = vec![Action::RotateLeft; half_turn];
        plan.extend(std::iter::repeat(Action::Forward).take(n));
        plan.extend(std::iter::repeat(Action::RotateLeft).take(half_turn));
        plan.extend(std::iter::repeat(Action::Forward).take(n));
        if let Some(t) = roll(world, start, &plan) {
            trajectory = Some(t);
            break;
        }
    }
    let mut trajectory = match trajectory {
        Some(t) => t,
        None => roll(world, start, &vec![Action::RotateLeft; 2 * half_turn]).expect("turning never collides"),
    };
    if !is_closed(&trajectory) {
        return Err(BenchError::TrajectoryNotClosed);
    }
    // remove float drift so the loop closes exactly
    *trajectory.last_mut().unwrap() = start;
    let target = nearest_visible(world, &sensor.pose(&start));
    Ok(CoreTask {
        id: 0,
        kind: TaskKind::ObjectPermanence,
        world_seed: world.seed,
        seed,
        initial: vec![start],
        trajectory,
        target,
        occluder: None,
    })
}

fn roll(world: &World, start: AgentState, plan: &[Action]) -> Option<Vec<AgentState>> {
    let mut s = start;
    let mut out = vec![s];
    for a in plan {
        let (next, collided) = world.step(&s, *a);
        if collided {
            return None;
        }
        s = next;
        out.push(s);
    }
    Some(out)
}

fn nearest_visible(world: &World, pose: &CameraPose) -> Option<usize> {
    (0..world.furniture.len())
        .filter(|&i| world.line_of_sight(&pose.position, i))
        .filter(|&i| pose.project(&world.furniture[i].aabb.center()).is_some())
        .min_by(|&a, &b| {
            let da = (world.furniture[a].aabb.center() - pose.position).norm();
            let db = (world.furniture[b].aabb.center() - pose.position).norm();
            da.total_cmp(&db).then(a.cmp(&b))
        })
}

/// Lattice-aligned imagination window for a task: around the target object,
/// over the whole target room, or around the first pose.
pub fn focus_grid(task: &CoreTask, world: &World, window: usize) -> GridSpec {
    let cell = crate::hypothesis::DEFAULT_CELL;
    match (task.kind, task.target) {
        (TaskKind::ObjectCompletion { .. }, Some(t)) => {
            let c = world.furniture[t].aabb.center();
            GridSpec::window(c.x, c.y, window, cell)
        }
        (TaskKind::RoomCompletion, Some(r)) => {
            let room = world.rooms[r];
            GridSpec::covering(room.min, room.max, cell)
        }
        _ => {
            let p = task.initial[0].position;
            GridSpec::window(p[0], p[1], window, cell)
        }
    }
}
