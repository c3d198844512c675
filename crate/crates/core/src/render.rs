//! Forward Gaussian splatting: project primitives to screen-space ellipses,
//! sort globally by depth, and alpha-composite front to back per pixel.
//!
//! Output is deterministic for any worker count: the sort key is total
//! (depth, then position, then index) and rows are composited independently.

use rayon::prelude::*;

use crate::geometry::{CameraPose, Vec3};
use crate::image::ImageBuf;
use crate::scene::{GaussianPrimitive, Observation, SceneBelief};

pub const ZNEAR: f64 = 0.05;
const EIG_FLOOR_2D: f64 = 1e-8;
const MIN_WEIGHT: f64 = 1e-4;
const ROWS_PER_BAND: usize = 4;

/// Screen-space footprint of one primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: [f64; 2],
    /// Symmetric 2×2 covariance as `[xx, xy, yy]` (pixels²).
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible(Splat2D),
    Culled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderSettings {
    pub background: [f64; 3],
    /// Added to the 2D covariance diagonal before compositing (pixels²).
    pub dilation: f64,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self {
            background: [0.5; 3],
            dilation: 0.3,
        }
    }
}

/// Rendered frame plus the per-pixel accumulated opacity Σw.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub observation: Observation,
    pub alpha: Vec<f64>,
}

fn eig_sym2(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mid = 0.5 * (a + c);
    let r = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mid - r, mid + r)
}

/// Clamp eigenvalues of a symmetric 2×2 matrix `[a b; b c]` from below.
fn clamp_sym2(a: f64, b: f64, c: f64, floor: f64) -> [f64; 3] {
    let (l0, l1) = eig_sym2(a, b, c);
    if l0 >= floor {
        return [a, b, c];
    }
    if b.abs() < 1e-300 {
        return [a.max(floor), 0.0, c.max(floor)];
    }
    // eigenvector for l1: (b, l1 - a)
    let (vx, vy) = {
        let (x, y) = (b, l1 - a);
        let n = (x * x + y * y).sqrt();
        (x / n, y / n)
    };
    let (m0, m1) = (l0.max(floor), l1.max(floor));
    // R diag(m1, m0) Rᵀ with first column v, second column perpendicular
    let xx = m1 * vx * vx + m0 * vy * vy;
    let xy = (m1 - m0) * vx * vy;
    let yy = m1 * vy * vy + m0 * vx * vx;
    [xx, xy, yy]
}

/// Perspective projection of one primitive. The 2D covariance is
/// `J W Σ Wᵀ Jᵀ` (W the world-to-camera rotation, J the projection Jacobian at
/// the mean), eigen-clamped, without the compositing dilation.
pub fn project(primitive: &GaussianPrimitive, camera: &CameraPose) -> Projection {
    project_indexed(primitive, camera, 0)
}

fn project_indexed(primitive: &GaussianPrimitive, camera: &CameraPose, index: usize) -> Projection {
    let t = camera.world_to_camera(primitive.mean());
    if t.z <= ZNEAR {
        return Projection::Culled;
    }
    let k = &camera.intrinsics;
    let iz = 1.0 / t.z;
    let u = k.fx * t.x * iz + k.cx;
    let v = k.fy * t.y * iz + k.cy;
    let w = &camera.rotation;
    let cam_cov = w * primitive.covariance() * w.transpose();
    // J = [[fx/z, 0, -fx x/z²], [0, fy/z, -fy y/z²]]
    let j0 = Vec3::new(k.fx * iz, 0.0, -k.fx * t.x * iz * iz);
    let j1 = Vec3::new(0.0, k.fy * iz, -k.fy * t.y * iz * iz);
    let cj0 = cam_cov * j0;
    let cj1 = cam_cov * j1;
    let (a, b, c) = (j0.dot(&cj0), j0.dot(&cj1), j1.dot(&cj1));
    let cov2d = clamp_sym2(a, b, c, EIG_FLOOR_2D);
    let (_, lmax) = eig_sym2(cov2d[0], cov2d[1], cov2d[2]);
    let r = 3.0 * lmax.sqrt();
    if u + r < 0.0 || u - r > k.width as f64 || v + r < 0.0 || v - r > k.height as f64 {
        return Projection::Culled;
    }
    Projection::Visible(Splat2D {
        mean2d: [u, v],
        cov2d,
        depth: t.z,
        index,
    })
}

struct Prepared {
    mean: [f64; 2],
    conic: [f64; 3],
    depth: f64,
    opacity: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    index: usize,
}

pub fn render(belief: &SceneBelief, camera: &CameraPose) -> Observation {
    render_primitives(&belief.primitives, camera, &RenderSettings::default()).observation
}

/// Render an arbitrary primitive slice. Embedding dimension is taken from the
/// first primitive (0 for an empty slice, giving a 0-channel semantic image).
pub fn render_primitives(prims: &[GaussianPrimitive], camera: &CameraPose, settings: &RenderSettings) -> Rendered {
    let k = camera.intrinsics;
    let (w, h) = (k.width, k.height);
    let dim = prims.first().map_or(0, |p| p.embedding().len());

    let mut splats: Vec<Prepared> = prims
        .par_iter()
        .enumerate()
        .filter_map(|(i, p)| match project_indexed(p, camera, i) {
            Projection::Culled => None,
            Projection::Visible(s) => prepare(&s, p.opacity(), settings.dilation, w, h),
        })
        .collect();
    splats.sort_by(|a, b| {
        a.depth
            .total_cmp(&b.depth)
            .then(a.mean[0].total_cmp(&b.mean[0]))
            .then(a.mean[1].total_cmp(&b.mean[1]))
            .then(a.index.cmp(&b.index))
    });

    let n_bands = h.div_ceil(ROWS_PER_BAND);
    let mut band_lists: Vec<Vec<u32>> = vec![Vec::new(); n_bands];
    for (si, s) in splats.iter().enumerate() {
        for band in band_lists.iter_mut().take(s.y1 / ROWS_PER_BAND + 1).skip(s.y0 / ROWS_PER_BAND) {
            band.push(si as u32);
        }
    }

    let mut rgb = ImageBuf::new(w, h, 3);
    let mut depth = ImageBuf::new(w, h, 1);
    let sem_ch = dim.max(1);
    let mut sem_buf = vec![0.0; w * h * sem_ch];
    let mut alpha = vec![0.0; w * h];

    rgb.data
        .par_chunks_mut(ROWS_PER_BAND * w * 3)
        .zip(depth.data.par_chunks_mut(ROWS_PER_BAND * w))
        .zip(sem_buf.par_chunks_mut(ROWS_PER_BAND * w * sem_ch))
        .zip(alpha.par_chunks_mut(ROWS_PER_BAND * w))
        .enumerate()
        .for_each(|(band, (((rgb_b, depth_b), sem_b), alpha_b))| {
            let row0 = band * ROWS_PER_BAND;
            let rows = alpha_b.len() / w;
            let npx = rows * w;
            let mut trans = vec![1.0f64; npx];
            let mut wsum = vec![0.0f64; npx];
            let mut color = vec![0.0f64; npx * 3];
            let mut zsum = vec![0.0f64; npx];
            let mut esum = vec![0.0f64; npx * dim];
            for &si in &band_lists[band] {
                let s = &splats[si as usize];
                let p = &prims[s.index];
                let c = p.appearance();
                let e = p.embedding();
                let ya = s.y0.max(row0);
                let yb = s.y1.min(row0 + rows - 1);
                for y in ya..=yb {
                    let dy = y as f64 + 0.5 - s.mean[1];
                    for x in s.x0..=s.x1 {
                        let li = (y - row0) * w + x;
                        let t = trans[li];
                        if t < 1e-6 {
                            continue;
                        }
                        let dx = x as f64 + 0.5 - s.mean[0];
                        let q = s.conic[0] * dx * dx + 2.0 * s.conic[1] * dx * dy + s.conic[2] * dy * dy;
                        if q > 18.0 {
                            continue;
                        }
                        let a = (s.opacity * (-0.5 * q).exp()).min(1.0);
                        let wk = a * t;
                        trans[li] = t * (1.0 - a);
                        wsum[li] += wk;
                        color[li * 3] += wk * c[0];
                        color[li * 3 + 1] += wk * c[1];
                        color[li * 3 + 2] += wk * c[2];
                        zsum[li] += wk * s.depth;
                        if e.len() == dim {
                            for (acc, v) in esum[li * dim..(li + 1) * dim].iter_mut().zip(e) {
                                *acc += wk * v;
                            }
                        }
                    }
                }
            }
            for li in 0..npx {
                let ws = wsum[li].min(1.0);
                alpha_b[li] = ws;
                for ch in 0..3 {
                    rgb_b[li * 3 + ch] = (color[li * 3 + ch] + (1.0 - ws) * settings.background[ch]).clamp(0.0, 1.0);
                }
                if ws >= MIN_WEIGHT {
                    if ws >= 0.5 {
                        depth_b[li] = zsum[li] / wsum[li];
                    }
                    let ev = &esum[li * dim..(li + 1) * dim];
                    let n = ev.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n > 0.0 {
                        for (o, v) in sem_b[li * dim..(li + 1) * dim].iter_mut().zip(ev) {
                            *o = v / n;
                        }
                    }
                }
            }
        });

    let semantic = if dim == 0 {
        ImageBuf::new(w, h, 0)
    } else {
        ImageBuf::from_vec(w, h, dim, sem_buf).expect("semantic buffer sized")
    };
    let mask: Vec<bool> = alpha.iter().map(|a| *a >= 0.5).collect();
    let observation = Observation {
        rgb,
        depth,
        semantic,
        mask,
        pose: camera.clone(),
    };
    Rendered { observation, alpha }
}

fn prepare(s: &Splat2D, opacity: f64, dilation: f64, w: usize, h: usize) -> Option<Prepared> {
    let (a, b, c) = (s.cov2d[0] + dilation, s.cov2d[1], s.cov2d[2] + dilation);
    let det = a * c - b * b;
    if !(det > 0.0) || opacity <= 0.0 {
        return None;
    }
    let (_, lmax) = eig_sym2(a, b, c);
    let r = 3.0 * lmax.sqrt();
    let fx0 = (s.mean2d[0] - r - 0.5).ceil().max(0.0);
    let fx1 = (s.mean2d[0] + r - 0.5).floor().min(w as f64 - 1.0);
    let fy0 = (s.mean2d[1] - r - 0.5).ceil().max(0.0);
    let fy1 = (s.mean2d[1] + r - 0.5).floor().min(h as f64 - 1.0);
    if fx0 > fx1 || fy0 > fy1 {
        return None;
    }
    Some(Prepared {
        mean: s.mean2d,
        conic: [c / det, -b / det, a / det],
        depth: s.depth,
        opacity,
        x0: fx0 as usize,
        x1: fx1 as usize,
        y0: fy0 as usize,
        y1: fy1 as usize,
        index: s.index,
    })
}
