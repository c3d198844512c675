//! Voxel grids for the sampler and carved free space from observation rays.

use std::collections::HashSet;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

/// Default voxel edge (m).
pub const DEFAULT_CELL: f64 = 0.25;
/// Default number of height layers; with [`LATTICE_ORIGIN`] these cover
/// z ∈ [-0.125, 1.125].
pub const DEFAULT_LAYERS: usize = 5;
/// Origin of the shared voxel lattice. Cell centers sit on multiples of the
/// cell size, so walls centered on such lines occupy a single cell.
pub const LATTICE_ORIGIN: [f64; 3] = [-0.125, -0.125, -0.125];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub cell: f64,
    pub dims: [usize; 3],
}

impl GridSpec {
    pub fn new(origin: [f64; 3], cell: f64, dims: [usize; 3]) -> Self {
        Self { origin, cell, dims }
    }

    /// Lattice-aligned grid covering `[min, max]` in x/y and the default layers.
    pub fn covering(min: [f64; 2], max: [f64; 2], cell: f64) -> Self {
        let lo = |v: f64, o: f64| ((v - o) / cell).floor();
        let hi = |v: f64, o: f64| ((v - o) / cell).ceil();
        let (o, c) = (LATTICE_ORIGIN, cell);
        let x0 = lo(min[0], o[0]);
        let y0 = lo(min[1], o[1]);
        let nx = (hi(max[0], o[0]) - x0).max(1.0) as usize;
        let ny = (hi(max[1], o[1]) - y0).max(1.0) as usize;
        Self {
            origin: [o[0] + x0 * c, o[1] + y0 * c, o[2]],
            cell,
            dims: [nx, ny, DEFAULT_LAYERS],
        }
    }

    /// Lattice-aligned `n × n` window whose center cell contains `(x, y)`.
    pub fn window(x: f64, y: f64, n: usize, cell: f64) -> Self {
        let o = LATTICE_ORIGIN;
        let cx = ((x - o[0]) / cell).floor();
        let cy = ((y - o[1]) / cell).floor();
        let half = (n / 2) as f64;
        Self {
            origin: [o[0] + (cx - half) * cell, o[1] + (cy - half) * cell, o[2]],
            cell,
            dims: [n, n, DEFAULT_LAYERS],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn cell_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for i in 0..3 {
            let f = ((p[i] - self.origin[i]) / self.cell).floor();
            if !(f >= 0.0 && (f as usize) < self.dims[i]) {
                return None;
            }
            out[i] = f as usize;
        }
        Some(out)
    }

    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + (x as f64 + 0.5) * self.cell,
            self.origin[1] + (y as f64 + 0.5) * self.cell,
            self.origin[2] + (z as f64 + 0.5) * self.cell,
        )
    }

    pub fn min_corner(&self, x: usize, y: usize, z: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + x as f64 * self.cell,
            self.origin[1] + y as f64 * self.cell,
            self.origin[2] + z as f64 * self.cell,
        )
    }
}

/// Coarse occupancy/semantic grid: the sampler's state space.
#[derive(Clone, Debug, PartialEq)]
pub struct VoxelBelief {
    pub spec: GridSpec,
    /// In [0, 1].
    pub occupancy: Vec<f64>,
    /// Class id per cell, 0 = none.
    pub semantics: Vec<u8>,
    pub known: Vec<bool>,
}

impl VoxelBelief {
    /// Everything unknown at occupancy 0.5.
    pub fn unknown(spec: GridSpec) -> Self {
        let n = spec.len();
        Self {
            spec,
            occupancy: vec![0.5; n],
            semantics: vec![0; n],
            known: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|k| **k).count()
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.occupancy[idx] >= 0.5
    }

    /// Sub-grid `[x0, x0+nx) × [y0, y0+ny)` over all layers.
    pub fn crop(&self, x0: usize, y0: usize, nx: usize, ny: usize) -> VoxelBelief {
        let s = &self.spec;
        let nz = s.dims[2];
        let spec = GridSpec {
            origin: [
                s.origin[0] + x0 as f64 * s.cell,
                s.origin[1] + y0 as f64 * s.cell,
                s.origin[2],
            ],
            cell: s.cell,
            dims: [nx, ny, nz],
        };
        let mut out = VoxelBelief::unknown(spec);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let src = s.index(x0 + x, y0 + y, z);
                    let dst = spec.index(x, y, z);
                    out.occupancy[dst] = self.occupancy[src];
                    out.semantics[dst] = self.semantics[src];
                    out.known[dst] = self.known[src];
                }
            }
        }
        out
    }

    /// Binary layout: u32 header `nz, ny, nx, 3`, then f32 `origin[3], cell`,
    /// then per cell (x fastest) f32 occupancy, class id, known flag.
    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.spec.dims;
        for v in [d[2], d[1], d[0], 3] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for v in [self.spec.origin[0], self.spec.origin[1], self.spec.origin[2], self.spec.cell] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for i in 0..self.len() {
            for v in [self.occupancy[i] as f32, self.semantics[i] as f32, self.known[i] as u8 as f32] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, m.to_string());
        let mut head = [0u8; 32];
        r.read_exact(&mut head)?;
        let u = |i: usize| u32::from_le_bytes(head[i * 4..i * 4 + 4].try_into().unwrap()) as usize;
        let f = |i: usize| f32::from_le_bytes(head[i * 4..i * 4 + 4].try_into().unwrap()) as f64;
        if u(3) != 3 {
            return Err(bad("voxel file must have 3 channels"));
        }
        let spec = GridSpec {
            origin: [f(4), f(5), f(6)],
            cell: f(7),
            dims: [u(2), u(1), u(0)],
        };
        if !(spec.cell > 0.0) {
            return Err(bad("non-positive cell size"));
        }
        let n = spec.len();
        let mut buf = vec![0u8; n * 12];
        r.read_exact(&mut buf)?;
        let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let mut out = VoxelBelief::unknown(spec);
        for i in 0..n {
            out.occupancy[i] = (vals[3 * i] as f64).clamp(0.0, 1.0);
            out.semantics[i] = vals[3 * i + 1] as u8;
            out.known[i] = vals[3 * i + 2] != 0.0;
        }
        Ok(out)
    }
}

/// Voxels of the shared lattice known to be empty because an observation
/// ray passed through them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FreeSpace {
    cell: f64,
    carved: HashSet<[i32; 3]>,
}

impl FreeSpace {
    pub fn new(cell: f64) -> Self {
        Self {
            cell,
            carved: HashSet::new(),
        }
    }

    pub fn cell(&self) -> f64 {
        self.cell
    }

    pub fn len(&self) -> usize {
        self.carved.len()
    }

    pub fn is_empty(&self) -> bool {
        self.carved.is_empty()
    }

    fn key(&self, p: &Vec3) -> [i32; 3] {
        let o = LATTICE_ORIGIN;
        [
            ((p.x - o[0]) / self.cell).floor() as i32,
            ((p.y - o[1]) / self.cell).floor() as i32,
            ((p.z - o[2]) / self.cell).floor() as i32,
        ]
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        self.carved.contains(&self.key(p))
    }

    fn lattice(&self, p: &Vec3) -> [f64; 3] {
        let o = LATTICE_ORIGIN;
        [(p.x - o[0]) / self.cell, (p.y - o[1]) / self.cell, (p.z - o[2]) / self.cell]
    }

    /// Voxels crossed by the segment, in order, excluding the one holding `b`
    /// (which is returned separately). Coordinates are in lattice units.
    fn traverse(a: [f64; 3], b: [f64; 3], mut visit: impl FnMut([i32; 3])) -> [i32; 3] {
        let mut cur = [a[0].floor() as i32, a[1].floor() as i32, a[2].floor() as i32];
        let last = [b[0].floor() as i32, b[1].floor() as i32, b[2].floor() as i32];
        let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let mut step = [0i32; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for i in 0..3 {
            if d[i] > 0.0 {
                step[i] = 1;
                t_max[i] = (cur[i] as f64 + 1.0 - a[i]) / d[i];
                t_delta[i] = 1.0 / d[i];
            } else if d[i] < 0.0 {
                step[i] = -1;
                t_max[i] = (a[i] - cur[i] as f64) / -d[i];
                t_delta[i] = -1.0 / d[i];
            }
        }
        let budget = (last[0] - cur[0]).abs() + (last[1] - cur[1]).abs() + (last[2] - cur[2]).abs();
        for _ in 0..=budget {
            if cur == last {
                break;
            }
            visit(cur);
            let axis = if t_max[0] <= t_max[1] && t_max[0] <= t_max[2] {
                0
            } else if t_max[1] <= t_max[2] {
                1
            } else {
                2
            };
            if t_max[axis] > 1.0 {
                break;
            }
            cur[axis] += step[axis];
            t_max[axis] += t_delta[axis];
        }
        last
    }

    /// Marks every voxel the segment `start → end` passes through. The voxel
    /// containing `end` is left out when the ray ended on a surface.
    pub fn carve(&mut self, start: &Vec3, end: &Vec3, hit: bool) {
        let (a, b) = (self.lattice(start), self.lattice(end));
        let carved = &mut self.carved;
        let last = Self::traverse(a, b, |v| {
            carved.insert(v);
        });
        if !hit {
            self.carved.insert(last);
        }
    }

    /// Like [`carve`](Self::carve) for a segment known to be empty, but a
    /// voxel is marked only when the segment passes within `core / 2` cells of
    /// its vertical axis (a centered square of side `core` in x/y).
    pub fn carve_core(&mut self, start: &Vec3, end: &Vec3, core: f64) {
        let (a, b) = (self.lattice(start), self.lattice(end));
        let half = 0.5 * core;
        let hits_core = |v: [i32; 3]| {
            let (mut t0, mut t1) = (0.0f64, 1.0f64);
            for i in 0..2 {
                let lo = v[i] as f64 + 0.5 - half;
                let hi = v[i] as f64 + 0.5 + half;
                let d = b[i] - a[i];
                if d.abs() < 1e-15 {
                    if a[i] < lo || a[i] > hi {
                        return false;
                    }
                } else {
                    let (u, w) = ((lo - a[i]) / d, (hi - a[i]) / d);
                    t0 = t0.max(u.min(w));
                    t1 = t1.min(u.max(w));
                }
            }
            t0 <= t1
        };
        let mut marked = Vec::new();
        let last = Self::traverse(a, b, |v| {
            if hits_core(v) {
                marked.push(v);
            }
        });
        if hits_core(last) {
            marked.push(last);
        }
        self.carved.extend(marked);
    }
}
