//! Geometric, occupancy, and image metrics. Each one is a plain function of
//! its inputs so it can be checked against brute-force reimplementations.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::geometry::Vec3;
use crate::image::ImageBuf;
use crate::planner::{CellState, OccupancyGrid};
use crate::semantic::cosine;

/// Object IoU voxel size (m).
pub const IOU_VOXEL: f64 = 0.05;
pub const PSNR_CAP: f64 = 99.0;
pub const HIST_BINS: usize = 8;
const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn voxel_key(p: &Vec3, size: f64) -> [i64; 3] {
    [(p.x / size).floor() as i64, (p.y / size).floor() as i64, (p.z / size).floor() as i64]
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

fn set_iou<T: std::hash::Hash + Eq>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    ratio(inter, a.len() + b.len() - inter)
}

/// IoU of the voxel sets occupied by two point clouds. Two empty clouds give 1.
pub fn iou3d(a: &[Vec3], b: &[Vec3], size: f64) -> f64 {
    let va: HashSet<[i64; 3]> = a.iter().map(|p| voxel_key(p, size)).collect();
    let vb: HashSet<[i64; 3]> = b.iter().map(|p| voxel_key(p, size)).collect();
    set_iou(&va, &vb)
}

/// IoU of the ground-plane cells covered by two point clouds.
pub fn bev_iou(a: &[Vec3], b: &[Vec3], size: f64) -> f64 {
    let key = |p: &Vec3| {
        let k = voxel_key(p, size);
        [k[0], k[1]]
    };
    let va: HashSet<[i64; 2]> = a.iter().map(key).collect();
    let vb: HashSet<[i64; 2]> = b.iter().map(key).collect();
    set_iou(&va, &vb)
}

/// Nearest-neighbor index over a uniform hash grid with about two points
/// per occupied cell.
struct PointGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    buckets: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> PointGrid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).max();
        let cell = (extent / (points.len() as f64 / 2.0).cbrt().max(1.0)).max(1e-3);
        let mut buckets: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(voxel_key(p, cell)).or_default().push(i);
        }
        Self {
            points,
            cell,
            buckets,
            lo: voxel_key(&min, cell),
            hi: voxel_key(&max, cell),
        }
    }

    /// Distance to the nearest indexed point. Rings of cells are searched
    /// outward until every unvisited cell is provably farther than the best.
    fn nearest(&self, q: &Vec3) -> f64 {
        let c = voxel_key(q, self.cell);
        // nearer rings hold no cells; farther than `reach` everything is seen
        let start = (0..3).map(|a| (self.lo[a] - c[a]).max(c[a] - self.hi[a]).max(0)).max().unwrap();
        let reach = (0..3).map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs())).max().unwrap();
        let span = |a: usize, r: i64| (self.lo[a] - c[a]).max(-r)..=(self.hi[a] - c[a]).min(r);
        let mut best = f64::INFINITY;
        for r in start..=reach {
            for dx in span(0, r) {
                for dy in span(1, r) {
                    for dz in span(2, r) {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(b) = self.buckets.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) {
                            for &i in b {
                                best = best.min((self.points[i] - q).norm_squared());
                            }
                        }
                    }
                }
            }
            if best.sqrt() <= r as f64 * self.cell {
                break;
            }
        }
        best.sqrt()
    }
}

/// Mean distance from each point of `from` to its nearest neighbor in `to`.
/// `None` when either set is empty.
pub fn directed_chamfer(from: &[Vec3], to: &[Vec3]) -> Option<f64> {
    if from.is_empty() || to.is_empty() {
        return None;
    }
    let index = PointGrid::new(to);
    Some(from.iter().map(|p| index.nearest(p)).sum::<f64>() / from.len() as f64)
}

/// Symmetric Chamfer distance: the mean of both directed means.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Option<f64> {
    Some(0.5 * (directed_chamfer(a, b)? + directed_chamfer(b, a)?))
}

/// Points on the surface of a box at `spacing`, skipping the bottom face when
/// `skip_bottom` is set. Every face gets both of its edges.
pub fn box_surface(min: [f64; 3], max: [f64; 3], spacing: f64, skip_bottom: bool) -> Vec<Vec3> {
    let steps = |a: usize| ((max[a] - min[a]) / spacing).ceil().max(1.0) as usize;
    let at = |a: usize, i: usize, n: usize| min[a] + (max[a] - min[a]) * i as f64 / n as f64;
    let mut out = Vec::new();
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        let (nu, nv) = (steps(u), steps(v));
        for side in [min[axis], max[axis]] {
            if skip_bottom && axis == 2 && side == min[2] {
                continue;
            }
            for i in 0..=nu {
                for j in 0..=nv {
                    let mut p = Vec3::zeros();
                    p[axis] = side;
                    p[u] = at(u, i, nu);
                    p[v] = at(v, j, nv);
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Concatenated per-channel histograms of the masked RGB pixels, normalized
/// to sum to 1 per channel. All zeros when nothing is masked in.
pub fn color_histogram(rgb: &ImageBuf, mask: &[bool]) -> Vec<f64> {
    let mut h = vec![0.0; 3 * HIST_BINS];
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if !m {
            continue;
        }
        n += 1;
        for (c, v) in rgb.at(i).iter().enumerate().take(3) {
            let b = ((v.clamp(0.0, 1.0) * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
            h[c * HIST_BINS + b] += 1.0;
        }
    }
    if n > 0 {
        h.iter_mut().for_each(|v| *v /= n as f64);
    }
    h
}

fn mse(a: &ImageBuf, b: &ImageBuf) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    let n = a.data.len().max(1) as f64;
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Peak signal-to-noise ratio for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(a: &ImageBuf, b: &ImageBuf) -> f64 {
    let e = mse(a, b);
    if e <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / e).log10()).min(PSNR_CAP)
}

fn luminance(img: &ImageBuf) -> Vec<f64> {
    (0..img.pixel_count())
        .map(|i| {
            let p = img.at(i);
            if p.len() >= 3 {
                0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
            } else {
                p[0]
            }
        })
        .collect()
}

/// Mean SSIM of the luminance over all 7×7 windows (one window covering the
/// whole image if it is smaller than that).
pub fn ssim(a: &ImageBuf, b: &ImageBuf) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    let (w, h) = (a.width, a.height);
    let (la, lb) = (luminance(a), luminance(b));
    let (ww, wh) = (SSIM_WINDOW.min(w), SSIM_WINDOW.min(h));
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - wh {
        for x0 in 0..=w - ww {
            let n = (ww * wh) as f64;
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in y0..y0 + wh {
                for x in x0..x0 + ww {
                    let (p, q) = (la[y * w + x], lb[y * w + x]);
                    sa += p;
                    sb += q;
                    saa += p * p;
                    sbb += q * q;
                    sab += p * q;
                }
            }
            let (ma, mb) = (sa / n, sb / n);
            let va = (saa / n - ma * ma).max(0.0);
            let vb = (sbb / n - mb * mb).max(0.0);
            let cov = sab / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    total / count as f64
}

/// Mean per-pixel cosine between two feature images. Pixels that are zero in
/// both count as 1, zero in only one as 0.
pub fn embedding_cosine(a: &ImageBuf, b: &ImageBuf) -> f64 {
    assert!(a.same_shape(b), "image shapes differ");
    let n = a.pixel_count();
    if n == 0 {
        return 1.0;
    }
    let zero = |v: &[f64]| v.iter().all(|x| *x == 0.0);
    let sum: f64 = (0..n)
        .map(|i| {
            let (p, q) = (a.at(i), b.at(i));
            match (zero(p), zero(q)) {
                (true, true) => 1.0,
                (false, false) => cosine(p, q),
                _ => 0.0,
            }
        })
        .sum();
    sum / n as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancyMetrics {
    pub occ_acc: f64,
    pub iou_free: f64,
    pub iou_occ: f64,
    pub occ_iou: f64,
}

/// Cell agreement between a predicted and a ground-truth grid of equal shape.
/// Accuracy counts only cells known in both (0 when there are none); the
/// per-class IoUs treat Unknown as "not that class" and are 1 when the class
/// is absent from both.
pub fn occupancy_metrics(pred: &OccupancyGrid, gt: &OccupancyGrid) -> OccupancyMetrics {
    assert_eq!(pred.dims, gt.dims, "grid shapes differ");
    let mut known = 0usize;
    let mut agree = 0usize;
    let mut inter = [0usize; 2];
    let mut union = [0usize; 2];
    for (&p, &g) in pred.cells.iter().zip(&gt.cells) {
        if p != CellState::Unknown && g != CellState::Unknown {
            known += 1;
            agree += usize::from(p == g);
        }
        for (k, s) in [CellState::Free, CellState::Occupied].into_iter().enumerate() {
            inter[k] += usize::from(p == s && g == s);
            union[k] += usize::from(p == s || g == s);
        }
    }
    let occ_acc = if known == 0 { 0.0 } else { agree as f64 / known as f64 };
    let iou_free = ratio(inter[0], union[0]);
    let iou_occ = ratio(inter[1], union[1]);
    OccupancyMetrics {
        occ_acc,
        iou_free,
        iou_occ,
        occ_iou: (iou_free + iou_occ) / 2.0,
    }
}

/// Precision, recall, and F1 of a predicted class multiset against the
/// ground-truth multiset. Empty-vs-empty scores 1 throughout.
pub fn multiset_prf(pred: &[u8], gt: &[u8]) -> (f64, f64, f64) {
    let count = |xs: &[u8]| {
        let mut m = BTreeMap::new();
        for x in xs {
            *m.entry(*x).or_insert(0usize) += 1;
        }
        m
    };
    let (cp, cg) = (count(pred), count(gt));
    let matched: usize = cp.iter().map(|(k, n)| (*n).min(cg.get(k).copied().unwrap_or(0))).sum();
    let p = if pred.is_empty() { f64::from(u8::from(gt.is_empty())) } else { matched as f64 / pred.len() as f64 };
    let r = if gt.is_empty() { f64::from(u8::from(pred.is_empty())) } else { matched as f64 / gt.len() as f64 };
    let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f1)
}
