//! Procedural indoor simulator: box-world rooms with doors and furniture,
//! raycast RGB-D + semantic observations, discrete agent kinematics, and the
//! object-goal success test.

mod gen;
pub mod io;

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Aabb, CameraPose, Intrinsics, Vec3};
use crate::hypothesis::{GridSpec, VoxelBelief};
use crate::image::ImageBuf;
use crate::scene::Observation;
use crate::semantic::{class_color, class_id, EmbeddingProvider};

pub const WALL_THICKNESS: f64 = 0.1;
pub const WALL_HEIGHT: f64 = 2.5;
pub const DOOR_WIDTH: f64 = 1.0;
pub const DOOR_HEIGHT: f64 = 2.0;
pub const AGENT_RADIUS: f64 = 0.2;
/// Obstacles above this height do not block the agent.
pub const AGENT_HEIGHT: f64 = 1.8;
pub const FORWARD_STEP: f64 = 0.25;
pub const TURN_ANGLE: f64 = PI / 6.0;
pub const MAX_RANGE: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("world generation failed after {0} attempts")]
    GenerationFailed(usize),
    #[error("invalid world config: {0}")]
    InvalidConfig(String),
    #[error("pose ({0:.2}, {1:.2}, {2:.2}) is outside the world")]
    PoseOutOfBounds(f64, f64, f64),
    #[error("no object of class {0:?} in this world")]
    UnknownTarget(String),
    #[error("world file: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub rooms_min: usize,
    pub rooms_max: usize,
    /// Filler furniture per 4 m² of room.
    pub furniture_density: f64,
    /// Footprint (m).
    pub size: [f64; 2],
    pub min_room: f64,
    /// Classes that must appear at least once.
    pub targets: Vec<String>,
    pub max_attempts: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            rooms_min: 2,
            rooms_max: 3,
            furniture_density: 0.5,
            size: [7.0, 5.0],
            min_room: 2.5,
            targets: ["bed", "sofa", "plant", "television"].map(String::from).to_vec(),
            max_attempts: 50,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: String| Err(WorldError::InvalidConfig(m));
        if self.rooms_min == 0 || self.rooms_min > self.rooms_max {
            return bad(format!("rooms_min {} / rooms_max {}", self.rooms_min, self.rooms_max));
        }
        if !(self.min_room > DOOR_WIDTH) || self.size.iter().any(|s| !(*s >= self.min_room)) {
            return bad(format!("size {:?} with min_room {}", self.size, self.min_room));
        }
        if !(self.furniture_density >= 0.0) {
            return bad(format!("furniture_density {}", self.furniture_density));
        }
        if let Some(t) = self.targets.iter().find(|t| class_id(t).is_none()) {
            return bad(format!("unknown target class {t:?}"));
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Room {
    pub fn area(&self) -> f64 {
        (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min[0] && x <= self.max[0] && y >= self.min[1] && y <= self.max[1]
    }
}

/// Opening in the wall between two rooms. `axis` is the wall normal: the
/// wall lies on `x = coord` for axis 0 and `y = coord` for axis 1, and the
/// opening spans `center ± width/2` along the other axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Door {
    pub rooms: [usize; 2],
    pub axis: usize,
    pub coord: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Furniture {
    pub class: String,
    pub aabb: Aabb,
    pub color: [f64; 3],
    pub room: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolidKind {
    Wall,
    Lintel,
    Furniture(usize),
}

/// Anything a ray can hit besides the floor.
#[derive(Clone, Debug, PartialEq)]
pub struct Solid {
    pub aabb: Aabb,
    pub class: u8,
    pub color: [f64; 3],
    pub kind: SolidKind,
}

#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub rooms: Vec<Room>,
    pub doors: Vec<Door>,
    pub furniture: Vec<Furniture>,
    pub solids: Vec<Solid>,
    /// `[min_x, min_y, max_x, max_y]`.
    pub bounds: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 2],
    pub heading: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    RotateLeft,
    RotateRight,
    Done,
}

/// Camera model and success thresholds shared by observation and judging.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sensor {
    pub width: usize,
    pub height: usize,
    pub hfov_deg: f64,
    pub camera_height: f64,
    pub success_radius: f64,
    /// Fraction of the image width, centered, in which the target must project.
    pub central_fraction: f64,
}

impl Default for Sensor {
    fn default() -> Self {
        Self {
            width: 64,
            height: 48,
            hfov_deg: 90.0,
            camera_height: 0.9,
            success_radius: 1.5,
            central_fraction: 0.4,
        }
    }
}

impl Sensor {
    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics::from_hfov(self.width, self.height, self.hfov_deg)
    }

    pub fn pose(&self, state: &AgentState) -> CameraPose {
        CameraPose::level(
            Vec3::new(state.position[0], state.position[1], self.camera_height),
            state.heading,
            self.intrinsics(),
        )
    }
}

/// Where each observation ray ended and whether it stopped on a surface.
#[derive(Clone, Debug, PartialEq)]
pub struct RayLog {
    pub origin: Vec3,
    pub ends: Vec<(Vec3, bool)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter along the (unnormalized) direction.
    pub t: f64,
    /// `None` for the floor.
    pub solid: Option<usize>,
    pub axis: usize,
}

pub const FLOOR_COLOR: [f64; 3] = [0.55, 0.42, 0.30];

impl World {
    pub fn generate(seed: u64, config: &WorldConfig) -> Result<World, WorldError> {
        gen::generate(seed, config)
    }

    fn assemble(seed: u64, config: WorldConfig, rooms: Vec<Room>, doors: Vec<Door>, furniture: Vec<Furniture>) -> World {
        let mut solids = build_walls(&rooms, &doors);
        for (i, f) in furniture.iter().enumerate() {
            solids.push(Solid {
                aabb: f.aabb,
                class: class_id(&f.class).unwrap_or(0),
                color: f.color,
                kind: SolidKind::Furniture(i),
            });
        }
        let bounds = rooms.iter().fold(
            [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
            |b, r| [b[0].min(r.min[0]), b[1].min(r.min[1]), b[2].max(r.max[0]), b[3].max(r.max[1])],
        );
        World {
            seed,
            config,
            rooms,
            doors,
            furniture,
            solids,
            bounds,
        }
    }

    pub fn room_of(&self, x: f64, y: f64) -> Option<usize> {
        self.rooms.iter().position(|r| r.contains(x, y))
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x >= self.bounds[0] && x <= self.bounds[2] && y >= self.bounds[1] && y <= self.bounds[3]
    }

    /// Nearest surface along `origin + t·dir`, `t ∈ (0, t_max]`.
    pub fn raycast(&self, origin: &Vec3, dir: &Vec3, t_max: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        if dir.z < 0.0 {
            let t = -origin.z / dir.z;
            let p = origin + dir * t;
            if t > 0.0 && t <= t_max && self.in_bounds(p.x, p.y) {
                best = Some(Hit { t, solid: None, axis: 2 });
            }
        }
        for (i, s) in self.solids.iter().enumerate() {
            if let Some((t, axis)) = s.aabb.ray_hit(origin, dir, 1e-9) {
                if t <= t_max && best.is_none_or(|b| t < b.t) {
                    best = Some(Hit { t, solid: Some(i), axis });
                }
            }
        }
        best
    }

    pub fn hit_class(&self, hit: &Hit) -> u8 {
        hit.solid
            .map_or(class_id("floor").unwrap(), |i| self.solids[i].class)
    }

    /// Raycast RGB-D + semantic frame. Depth is camera z-depth; rays longer
    /// than [`MAX_RANGE`] are invalid. Also returns the ray log used to carve
    /// free space.
    pub fn observe(&self, pose: &CameraPose, provider: &EmbeddingProvider) -> Result<(Observation, RayLog), WorldError> {
        let p = pose.position;
        if !self.in_bounds(p.x, p.y) || !(0.0..=WALL_HEIGHT).contains(&p.z) {
            return Err(WorldError::PoseOutOfBounds(p.x, p.y, p.z));
        }
        let k = pose.intrinsics;
        let (w, h) = (k.width, k.height);
        let dim = provider.dim();
        let floor_id = class_id("floor").unwrap();
        let embeds: Vec<Vec<f64>> = (0..=crate::semantic::NUM_CLASSES as u8)
            .map(|c| provider.embed_class(c).map_or(vec![0.0; dim], |e| e.values().to_vec()))
            .collect();
        let rows: Vec<Vec<(f64, [f64; 3], u8, Vec3, bool)>> = (0..h)
            .into_par_iter()
            .map(|row| {
                (0..w)
                    .map(|col| {
                        let dir = pose.pixel_direction(col as f64 + 0.5, row as f64 + 0.5);
                        let norm = dir.norm();
                        match self.raycast(&p, &dir, MAX_RANGE / norm) {
                            Some(hit) => {
                                let dist = hit.t * norm;
                                let (color, class) = match hit.solid {
                                    Some(i) => (self.solids[i].color, self.solids[i].class),
                                    None => (FLOOR_COLOR, floor_id),
                                };
                                let face = [0.75, 0.9, 1.0][hit.axis];
                                let shade = face / (1.0 + 0.05 * dist);
                                (hit.t, color.map(|c| c * shade), class, p + dir * hit.t, true)
                            }
                            None => (0.0, [0.5; 3], 0, p + dir * (MAX_RANGE / norm), false),
                        }
                    })
                    .collect()
            })
            .collect();
        let mut rgb = ImageBuf::new(w, h, 3);
        let mut depth = ImageBuf::new(w, h, 1);
        let mut semantic = ImageBuf::new(w, h, dim);
        let mut mask = vec![false; w * h];
        let mut ends = Vec::with_capacity(w * h);
        for (row, cols) in rows.into_iter().enumerate() {
            for (col, (d, c, class, end, hit)) in cols.into_iter().enumerate() {
                let i = row * w + col;
                rgb.px_mut(col, row).copy_from_slice(&c);
                if hit {
                    depth.data[i] = d;
                    semantic.px_mut(col, row).copy_from_slice(&embeds[class as usize]);
                    mask[i] = true;
                }
                ends.push((end, hit));
            }
        }
        let obs = Observation::new(rgb, depth, semantic, mask, pose.clone()).expect("consistent shapes");
        Ok((obs, RayLog { origin: p, ends }))
    }

    /// Whether a disk of [`AGENT_RADIUS`] at `(x, y)` touches an obstacle or
    /// leaves the world.
    pub fn collides(&self, x: f64, y: f64) -> bool {
        let r = AGENT_RADIUS;
        if x - r < self.bounds[0] || y - r < self.bounds[1] || x + r > self.bounds[2] || y + r > self.bounds[3] {
            return true;
        }
        self.solids
            .iter()
            .any(|s| s.aabb.z_overlaps(0.0, AGENT_HEIGHT) && s.aabb.footprint_distance(x, y) < r)
    }

    pub fn step(&self, state: &AgentState, action: Action) -> (AgentState, bool) {
        match action {
            Action::Forward => {
                let (s, c) = state.heading.sin_cos();
                let next = [state.position[0] + FORWARD_STEP * c, state.position[1] + FORWARD_STEP * s];
                if self.collides(next[0], next[1]) {
                    (*state, true)
                } else {
                    (
                        AgentState {
                            position: next,
                            heading: state.heading,
                        },
                        false,
                    )
                }
            }
            Action::RotateLeft => (
                AgentState {
                    heading: wrap_angle(state.heading + TURN_ANGLE),
                    ..*state
                },
                false,
            ),
            Action::RotateRight => (
                AgentState {
                    heading: wrap_angle(state.heading - TURN_ANGLE),
                    ..*state
                },
                false,
            ),
            Action::Done => (*state, false),
        }
    }

    pub fn targets_of(&self, class: &str) -> Vec<usize> {
        let want = class.to_lowercase();
        self.furniture
            .iter()
            .enumerate()
            .filter(|(_, f)| f.class == want)
            .map(|(i, _)| i)
            .collect()
    }

    /// True when some instance of `target_class` is within the success radius
    /// (footprint distance), its center projects into the central image band,
    /// and the ray to its center meets that object before anything else.
    pub fn check_success(&self, state: &AgentState, target_class: &str, sensor: &Sensor) -> Result<bool, WorldError> {
        let ids = self.targets_of(target_class);
        if ids.is_empty() {
            return Err(WorldError::UnknownTarget(target_class.to_string()));
        }
        let pose = sensor.pose(state);
        let w = sensor.width as f64;
        for id in ids {
            let f = &self.furniture[id];
            if f.aabb.footprint_distance(state.position[0], state.position[1]) > sensor.success_radius {
                continue;
            }
            let c = f.aabb.center();
            let Some((u, _, z)) = pose.project(&c) else {
                continue;
            };
            if z <= 0.0 || (u - w / 2.0).abs() > sensor.central_fraction * w / 2.0 {
                continue;
            }
            if self.line_of_sight(&pose.position, id) {
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Whether the segment from `eye` to the center of furniture `id` reaches
    /// that object before any other surface.
    pub fn line_of_sight(&self, eye: &Vec3, id: usize) -> bool {
        let target = &self.furniture[id];
        let dir = target.aabb.center() - eye;
        match self.raycast(eye, &dir, 1.0) {
            Some(hit) => hit.solid.is_some_and(|s| self.solids[s].kind == SolidKind::Furniture(id)),
            // eye inside the box
            None => target.aabb.contains(eye),
        }
    }

    /// Random collision-free start on a voxel-lattice cell center with a
    /// heading that is a multiple of the turn angle.
    pub fn sample_start(&self, rng: &mut impl Rng) -> AgentState {
        let cell = crate::hypothesis::DEFAULT_CELL;
        let spec = GridSpec::covering([self.bounds[0], self.bounds[1]], [self.bounds[2], self.bounds[3]], cell);
        let free: Vec<(f64, f64)> = (0..spec.dims[1])
            .flat_map(|y| (0..spec.dims[0]).map(move |x| (x, y)))
            .map(|(x, y)| {
                let c = spec.center(x, y, 0);
                (c.x, c.y)
            })
            .filter(|&(x, y)| !self.collides(x, y))
            .collect();
        let &(x, y) = &free[rng.gen_range(0..free.len())];
        AgentState {
            position: [x, y],
            heading: wrap_angle(rng.gen_range(0..12) as f64 * TURN_ANGLE),
        }
    }

    /// Ground-truth voxel grid: a cell is occupied when any solid overlaps it
    /// with positive volume or it contains the floor surface inside the
    /// world. Its class is that of the solid with the largest overlap, floor
    /// otherwise. Every cell is known.
    pub fn voxel_truth(&self, spec: GridSpec) -> VoxelBelief {
        let mut v = VoxelBelief::unknown(spec);
        let floor = class_id("floor").unwrap();
        let c = spec.cell;
        for i in 0..spec.len() {
            let [x, y, z] = spec.coords(i);
            let lo = spec.min_corner(x, y, z);
            let hi = lo + Vec3::new(c, c, c);
            let mut best = (0.0, 0u8);
            for s in &self.solids {
                let mut vol = 1.0;
                for a in 0..3 {
                    vol *= (hi[a].min(s.aabb.max[a]) - lo[a].max(s.aabb.min[a])).max(0.0);
                }
                if vol > best.0 + 1e-12 {
                    best = (vol, s.class);
                }
            }
            let center = spec.center(x, y, z);
            v.known[i] = true;
            if best.0 > 1e-12 {
                v.occupancy[i] = 1.0;
                v.semantics[i] = best.1;
            } else if lo.z <= 0.0 && hi.z > 0.0 && self.in_bounds(center.x, center.y) {
                v.occupancy[i] = 1.0;
                v.semantics[i] = floor;
            } else {
                v.occupancy[i] = 0.0;
            }
        }
        v
    }

    /// Lattice-aligned voxel spec covering the whole world.
    pub fn grid_spec(&self) -> GridSpec {
        GridSpec::covering(
            [self.bounds[0], self.bounds[1]],
            [self.bounds[2], self.bounds[3]],
            crate::hypothesis::DEFAULT_CELL,
        )
    }

    pub fn from_parts(seed: u64, config: WorldConfig, rooms: Vec<Room>, doors: Vec<Door>, furniture: Vec<Furniture>) -> World {
        World::assemble(seed, config, rooms, doors, furniture)
    }
}

/// Wall boxes on every room edge, minus door openings, plus a lintel above
/// each door. Edges are tracked in 1/8 m units so shared walls merge.
fn build_walls(rooms: &[Room], doors: &[Door]) -> Vec<Solid> {
    use std::collections::BTreeSet;
    const U: f64 = 0.125;
    let q = |v: f64| (v / U).round() as i64;
    // (normal axis, wall coordinate, unit index along the wall)
    let mut units: BTreeSet<(usize, i64, i64)> = BTreeSet::new();
    for r in rooms {
        for axis in 0..2 {
            let other = 1 - axis;
            for c in [r.min[axis], r.max[axis]] {
                for k in q(r.min[other])..q(r.max[other]) {
                    units.insert((axis, q(c), k));
                }
            }
        }
    }
    let in_door = |axis: usize, c: i64, k: i64| {
        doors.iter().any(|d| {
            d.axis == axis && q(d.coord) == c && {
                let lo = k as f64 * U;
                lo >= d.center - d.width / 2.0 - 1e-9 && lo + U <= d.center + d.width / 2.0 + 1e-9
            }
        })
    };
    let door_edge = |axis: usize, c: i64, pos: f64| {
        doors
            .iter()
            .any(|d| d.axis == axis && q(d.coord) == c && ((pos - (d.center - d.width / 2.0)).abs() < 1e-9 || (pos - (d.center + d.width / 2.0)).abs() < 1e-9))
    };
    let wall = class_id("wall").unwrap();
    let mut solids = Vec::new();
    let units: Vec<(usize, i64, i64)> = units.into_iter().filter(|&(a, c, k)| !in_door(a, c, k)).collect();
    let mut i = 0;
    while i < units.len() {
        let (axis, c, k0) = units[i];
        let mut k1 = k0;
        while i + 1 < units.len() && units[i + 1] == (axis, c, k1 + 1) {
            i += 1;
            k1 += 1;
        }
        i += 1;
        let (mut lo, mut hi) = (k0 as f64 * U, (k1 + 1) as f64 * U);
        let half = WALL_THICKNESS / 2.0;
        if !door_edge(axis, c, lo) {
            lo -= half;
        }
        if !door_edge(axis, c, hi) {
            hi += half;
        }
        let cc = c as f64 * U;
        let aabb = if axis == 0 {
            Aabb::new([cc - half, lo, 0.0], [cc + half, hi, WALL_HEIGHT])
        } else {
            Aabb::new([lo, cc - half, 0.0], [hi, cc + half, WALL_HEIGHT])
        };
        solids.push(Solid {
            aabb,
            class: wall,
            color: class_color(wall),
            kind: SolidKind::Wall,
        });
    }
    let door = class_id("door").unwrap();
    for d in doors {
        let half = WALL_THICKNESS / 2.0;
        let (lo, hi) = (d.center - d.width / 2.0, d.center + d.width / 2.0);
        let aabb = if d.axis == 0 {
            Aabb::new([d.coord - half, lo, DOOR_HEIGHT], [d.coord + half, hi, WALL_HEIGHT])
        } else {
            Aabb::new([lo, d.coord - half, DOOR_HEIGHT], [hi, d.coord + half, WALL_HEIGHT])
        };
        solids.push(Solid {
            aabb,
            class: door,
            color: class_color(door),
            kind: SolidKind::Lintel,
        });
    }
    solids
}
