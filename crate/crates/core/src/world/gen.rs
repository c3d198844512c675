//! Procedural layout: recursive splits into rooms, doors on shared walls,
//! furniture against walls or free-standing.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Door, Furniture, Room, World, WorldConfig, WorldError, DOOR_WIDTH, WALL_THICKNESS};
use crate::geometry::Aabb;
use crate::semantic::class_color;

/// Footprint (long side, short side) and height per furniture class.
fn class_size(class: &str) -> (f64, f64, f64) {
    match class {
        "bed" => (2.0, 1.4, 0.5),
        "sofa" => (1.8, 0.8, 0.8),
        "table" => (1.2, 0.8, 0.75),
        "chair" => (0.5, 0.5, 0.9),
        "shelf" => (1.0, 0.35, 1.8),
        "plant" => (0.4, 0.4, 1.0),
        "television" => (1.0, 0.3, 1.1),
        "lamp" => (0.3, 0.3, 1.5),
        _ => (0.6, 0.6, 0.6),
    }
}

const FILLER: [&str; 4] = ["table", "chair", "shelf", "lamp"];
const SNAP: f64 = 0.25;
/// Free gap kept between furniture pieces and in front of doors (m).
const CLEARANCE: f64 = 0.75;

pub(super) fn generate(seed: u64, cfg: &WorldConfig) -> Result<World, WorldError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..cfg.max_attempts {
        let Some(rooms) = split_rooms(cfg, &mut rng) else {
            continue;
        };
        let doors = place_doors(&rooms);
        if !rooms_connected(rooms.len(), &doors) {
            continue;
        }
        let Some(furniture) = place_furniture(cfg, &rooms, &doors, &mut rng) else {
            continue;
        };
        return Ok(World::assemble(seed, cfg.clone(), rooms, doors, furniture));
    }
    Err(WorldError::GenerationFailed(cfg.max_attempts))
}

fn split_rooms(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Option<Vec<Room>> {
    let n = rng.gen_range(cfg.rooms_min..=cfg.rooms_max);
    let mut rooms = vec![Room {
        min: [0.0, 0.0],
        max: cfg.size,
    }];
    while rooms.len() < n {
        // split the largest room across its longer side
        let (idx, _) = rooms
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.area()))
            .fold((0, f64::MIN), |a, b| if b.1 > a.1 { b } else { a });
        let r = rooms[idx];
        let axis = if r.max[0] - r.min[0] >= r.max[1] - r.min[1] { 0 } else { 1 };
        let (lo, hi) = (r.min[axis] + cfg.min_room, r.max[axis] - cfg.min_room);
        if lo > hi + 1e-9 {
            return None;
        }
        let slots = ((hi - lo) / SNAP + 1e-9).floor().max(0.0) as i64;
        let cut = lo + SNAP * rng.gen_range(0..=slots) as f64;
        let mut a = r;
        let mut b = r;
        a.max[axis] = cut;
        b.min[axis] = cut;
        rooms[idx] = a;
        rooms.push(b);
    }
    Some(rooms)
}

/// Overlap interval of two rooms' shared edge: (axis of the wall normal,
/// wall coordinate, lo, hi).
pub(super) fn shared_edge(a: &Room, b: &Room) -> Option<(usize, f64, f64, f64)> {
    for axis in 0..2 {
        let other = 1 - axis;
        let touching = if (a.max[axis] - b.min[axis]).abs() < 1e-9 {
            Some(a.max[axis])
        } else if (b.max[axis] - a.min[axis]).abs() < 1e-9 {
            Some(b.max[axis])
        } else {
            None
        };
        if let Some(c) = touching {
            let lo = a.min[other].max(b.min[other]);
            let hi = a.max[other].min(b.max[other]);
            if hi > lo {
                return Some((axis, c, lo, hi));
            }
        }
    }
    None
}

/// Doors need this much shared wall: the opening plus a post on each side.
const MIN_DOOR_OVERLAP: f64 = DOOR_WIDTH + 0.6;

fn place_doors(rooms: &[Room]) -> Vec<Door> {
    let mut doors = Vec::new();
    for i in 0..rooms.len() {
        for j in i + 1..rooms.len() {
            if let Some((axis, c, lo, hi)) = shared_edge(&rooms[i], &rooms[j]) {
                if hi - lo < MIN_DOOR_OVERLAP {
                    continue;
                }
                // door edges on voxel boundaries: center at 0.125 + 0.25 k
                let mid = 0.5 * (lo + hi);
                let center = ((mid - 0.125) / 0.25).round() * 0.25 + 0.125;
                let center = center.clamp(lo + DOOR_WIDTH / 2.0 + 0.25, hi - DOOR_WIDTH / 2.0 - 0.25);
                doors.push(Door {
                    rooms: [i, j],
                    axis,
                    coord: c,
                    center,
                    width: DOOR_WIDTH,
                });
            }
        }
    }
    doors
}

pub(super) fn rooms_connected(n: usize, doors: &[Door]) -> bool {
    if n == 0 {
        return false;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(r) = stack.pop() {
        for d in doors {
            for (a, b) in [(d.rooms[0], d.rooms[1]), (d.rooms[1], d.rooms[0])] {
                if a == r && !seen[b] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
    }
    seen.iter().all(|s| *s)
}

fn door_zone(d: &Door) -> Aabb {
    // square in front of and behind the opening
    let half = DOOR_WIDTH / 2.0 + 0.25;
    let depth = CLEARANCE + 0.5;
    if d.axis == 0 {
        Aabb::new([d.coord - depth, d.center - half, 0.0], [d.coord + depth, d.center + half, 2.5])
    } else {
        Aabb::new([d.center - half, d.coord - depth, 0.0], [d.center + half, d.coord + depth, 2.5])
    }
}

fn place_furniture(cfg: &WorldConfig, rooms: &[Room], doors: &[Door], rng: &mut ChaCha8Rng) -> Option<Vec<Furniture>> {
    let zones: Vec<Aabb> = doors.iter().map(door_zone).collect();
    let mut placed: Vec<Furniture> = Vec::new();
    let mut wanted: Vec<(String, Option<usize>)> = cfg.targets.iter().map(|t| (t.clone(), None)).collect();
    for (ri, r) in rooms.iter().enumerate() {
        let extra = (cfg.furniture_density * r.area() / 4.0).round() as usize;
        for _ in 0..extra {
            wanted.push((FILLER.choose(rng).unwrap().to_string(), Some(ri)));
        }
    }
    let n_targets = cfg.targets.len();
    for (k, (class, room)) in wanted.into_iter().enumerate() {
        let mut done = false;
        for _ in 0..60 {
            let ri = room.unwrap_or_else(|| rng.gen_range(0..rooms.len()));
            if let Some(bx) = try_place(&class, &rooms[ri], rng) {
                let blocked = zones.iter().any(|z| overlaps_xy(z, &bx, 0.0))
                    || placed.iter().any(|f| overlaps_xy(&f.aabb, &bx, CLEARANCE));
                if !blocked {
                    let base = class_color(crate::semantic::class_id(&class).unwrap_or(0));
                    let jitter: f64 = rng.gen_range(-0.08..0.08);
                    placed.push(Furniture {
                        class: class.clone(),
                        aabb: bx,
                        color: base.map(|c| (c + jitter).clamp(0.0, 1.0)),
                        room: ri,
                    });
                    done = true;
                    break;
                }
            }
        }
        // targets are mandatory, fillers are best effort
        if !done && k < n_targets {
            return None;
        }
    }
    Some(placed)
}

fn overlaps_xy(a: &Aabb, b: &Aabb, gap: f64) -> bool {
    a.min[0] < b.max[0] + gap && b.min[0] < a.max[0] + gap && a.min[1] < b.max[1] + gap && b.min[1] < a.max[1] + gap
}

fn try_place(class: &str, room: &Room, rng: &mut ChaCha8Rng) -> Option<Aabb> {
    let (long, short, h) = class_size(class);
    let inset = WALL_THICKNESS / 2.0 + 0.05;
    let (x0, y0) = (room.min[0] + inset, room.min[1] + inset);
    let (x1, y1) = (room.max[0] - inset, room.max[1] - inset);
    let snap = |v: f64| (v / 0.05).round() * 0.05;
    let against_wall = rng.gen_bool(0.75);
    let (sx, sy, px, py);
    if against_wall {
        let side = rng.gen_range(0..4);
        // long side along the wall
        let along_x = side < 2;
        (sx, sy) = if along_x { (long, short) } else { (short, long) };
        if x1 - sx < x0 || y1 - sy < y0 {
            return None;
        }
        match side {
            0 => {
                px = snap(rng.gen_range(x0..=x1 - sx));
                py = y0;
            }
            1 => {
                px = snap(rng.gen_range(x0..=x1 - sx));
                py = y1 - sy;
            }
            2 => {
                px = x0;
                py = snap(rng.gen_range(y0..=y1 - sy));
            }
            _ => {
                px = x1 - sx;
                py = snap(rng.gen_range(y0..=y1 - sy));
            }
        }
    } else {
        (sx, sy) = if rng.gen_bool(0.5) { (long, short) } else { (short, long) };
        let m = CLEARANCE;
        if x1 - m - sx < x0 + m || y1 - m - sy < y0 + m {
            return None;
        }
        px = snap(rng.gen_range(x0 + m..=x1 - m - sx));
        py = snap(rng.gen_range(y0 + m..=y1 - m - sy));
    }
    let bx = Aabb::new([px, py, 0.0], [px + sx, py + sy, h]);
    if bx.min[0] < x0 - 1e-9 || bx.min[1] < y0 - 1e-9 || bx.max[0] > x1 + 1e-9 || bx.max[1] > y1 + 1e-9 {
        return None;
    }
    Some(bx)
}
