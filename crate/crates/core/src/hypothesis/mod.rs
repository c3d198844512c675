//! Multi-hypothesis completion of unseen space.
//!
//! Observed primitives and carved free space are rasterized into a
//! [`VoxelBelief`]; the conditional reverse diffusion chain then fills the
//! unknown cells K times from independent seeds, and each sample is lifted
//! back into imagined Gaussians.

pub mod train;
pub mod voxel;

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::diffusion::denoiser::{DenoiserParams, GridDims, INPUT_CHANNELS};
use crate::diffusion::{forward_noise, reverse_jump, DiffusionError, NoiseSchedule};
use crate::scene::{GaussianPrimitive, Origin};
use crate::semantic::{class_color, class_id, EmbeddingProvider};

pub use train::{train_denoiser, view_mask, TrainConfig, TrainReport};
pub use voxel::{FreeSpace, GridSpec, VoxelBelief, DEFAULT_CELL, DEFAULT_LAYERS, LATTICE_ORIGIN};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypothesisError {
    #[error("grid has no cells")]
    EmptyGrid,
    #[error("denoiser has not been trained")]
    UntrainedDenoiser,
    #[error("need at least {need} training grids, got {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("hypothesis count must be at least 1")]
    InvalidCount,
    #[error("denoiser class head has {got} classes, expected {want}")]
    ClassHeadMismatch { got: usize, want: usize },
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
}

/// Conditioned grid plus the number of primitives that fell outside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Rasterized {
    pub voxels: VoxelBelief,
    pub out_of_bounds: usize,
}

/// Occupied+known where an observed primitive mean lies, free+known where
/// observation rays passed, unknown (0.5) elsewhere. Known occupied cells take
/// the class of the first primitive that landed in them.
pub fn rasterize_observed<'a>(
    observed: impl IntoIterator<Item = &'a GaussianPrimitive>,
    spec: GridSpec,
    free: &FreeSpace,
    provider: &EmbeddingProvider,
) -> Result<Rasterized, HypothesisError> {
    if spec.is_empty() {
        return Err(HypothesisError::EmptyGrid);
    }
    let mut v = VoxelBelief::unknown(spec);
    let mut out_of_bounds = 0;
    for p in observed {
        let Some([x, y, z]) = spec.cell_of(p.mean()) else {
            out_of_bounds += 1;
            continue;
        };
        let i = spec.index(x, y, z);
        if !(v.known[i] && v.occupancy[i] == 1.0) {
            v.known[i] = true;
            v.occupancy[i] = 1.0;
            v.semantics[i] = provider.classify(p.embedding()).map_or(0, |(c, _)| c);
        }
    }
    if !free.is_empty() {
        for i in 0..spec.len() {
            if v.known[i] {
                continue;
            }
            let [x, y, z] = spec.coords(i);
            if free.contains(&spec.center(x, y, z)) {
                v.known[i] = true;
                v.occupancy[i] = 0.0;
            }
        }
    }
    Ok(Rasterized { voxels: v, out_of_bounds })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Number of reverse steps actually taken; timesteps are spread evenly
    /// from T down to 1.
    pub steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 8 }
    }
}

/// Descending timestep sequence ending at 1.
pub fn strided_timesteps(t: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t);
    let mut out: Vec<usize> = (0..steps)
        .map(|i| {
            let f = i as f64 / steps as f64;
            (t as f64 - f * (t - 1) as f64).round() as usize
        })
        .collect();
    out.dedup();
    if *out.last().unwrap() != 1 {
        out.push(1);
    }
    out
}

/// K conditional samples. Known cells are clamped to their conditioned value
/// before every network call and in every clean estimate, so they come out
/// exactly as given. Hypothesis `k` uses seed `seed ^ k`.
pub fn sample_hypotheses(
    cond: &VoxelBelief,
    k: usize,
    denoiser: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Vec<VoxelBelief>, HypothesisError> {
    if k == 0 {
        return Err(HypothesisError::InvalidCount);
    }
    if cond.is_empty() {
        return Err(HypothesisError::EmptyGrid);
    }
    if !denoiser.is_trained() {
        return Err(HypothesisError::UntrainedDenoiser);
    }
    let ncls = denoiser.config.num_classes;
    if ncls != crate::semantic::NUM_CLASSES {
        return Err(HypothesisError::ClassHeadMismatch {
            got: ncls,
            want: crate::semantic::NUM_CLASSES,
        });
    }
    (0..k)
        .into_par_iter()
        .map(|id| sample_one(cond, denoiser, schedule, cfg, seed ^ id as u64))
        .collect()
}

fn sample_one(
    cond: &VoxelBelief,
    denoiser: &DenoiserParams,
    schedule: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<VoxelBelief, HypothesisError> {
    let n = cond.len();
    let mut out = cond.clone();
    if cond.known.iter().all(|k| *k) {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |m: usize| -> Vec<f64> { (0..m).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let y_cond: Vec<f64> = cond
        .occupancy
        .iter()
        .zip(&cond.known)
        .map(|(o, k)| if *k { 2.0 * o - 1.0 } else { 0.0 })
        .collect();
    let d = cond.spec.dims;
    let dims = GridDims {
        nx: d[0],
        ny: d[1],
        nz: d[2],
    };
    let t_max = schedule.steps();
    let taus = strided_timesteps(t_max, cfg.steps);
    let mut x = gauss(n);
    let mut input = vec![0f32; n * INPUT_CHANNELS];
    let mut head = Vec::new();
    let mut x0 = vec![0.0; n];
    for (si, &t) in taus.iter().enumerate() {
        let noised = forward_noise(&y_cond, t, &gauss(n), schedule)?;
        for i in 0..n {
            if cond.known[i] {
                x[i] = noised[i];
            }
            let c = &mut input[i * INPUT_CHANNELS..(i + 1) * INPUT_CHANNELS];
            c[0] = x[i] as f32;
            c[1] = cond.known[i] as u8 as f32;
            c[2] = y_cond[i] as f32;
            c[3] = (t as f64 / t_max as f64) as f32;
        }
        head = denoiser.network.forward(&input, dims);
        let cout = denoiser.config.out_channels();
        for i in 0..n {
            x0[i] = if cond.known[i] {
                y_cond[i]
            } else {
                (head[i * cout] as f64).clamp(-1.0, 1.0)
            };
        }
        if let Some(&s) = taus.get(si + 1) {
            x = reverse_jump(&x, &x0, t, s, schedule, &gauss(n))?;
        }
    }
    for i in 0..n {
        if !cond.known[i] {
            out.occupancy[i] = if x0[i] >= 0.0 { 1.0 } else { 0.0 };
            out.semantics[i] = 0;
        }
    }
    assign_classes(&mut out, cond, &head, denoiser.config.out_channels());
    Ok(out)
}

fn argmax(scores: &[f32]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

/// Floor-layer cells are labeled individually. Above the floor, imagined
/// occupied cells are grouped into 6-connected components (structure and
/// objects grouped separately) and each component takes the class with the
/// highest summed head score.
fn assign_classes(out: &mut VoxelBelief, cond: &VoxelBelief, head: &[f32], cout: usize) {
    let spec = out.spec;
    let n = out.len();
    let wall = class_id("wall").unwrap() as usize - 1;
    let imagined = |i: usize| !cond.known[i] && out.occupancy[i] >= 0.5;
    let cell_class = |i: usize| argmax(&head[i * cout + 1..(i + 1) * cout]);
    let mut seen = vec![false; n];
    for start in 0..n {
        if seen[start] || !imagined(start) {
            continue;
        }
        let [_, _, z] = spec.coords(start);
        if z == 0 {
            out.semantics[start] = cell_class(start) as u8 + 1;
            seen[start] = true;
            continue;
        }
        let structural = cell_class(start) == wall;
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let [x, y, z] = spec.coords(i);
            let mut push = |xx: isize, yy: isize, zz: isize| {
                if xx < 0 || yy < 0 || zz < 1 {
                    return;
                }
                let (xx, yy, zz) = (xx as usize, yy as usize, zz as usize);
                if xx >= spec.dims[0] || yy >= spec.dims[1] || zz >= spec.dims[2] {
                    return;
                }
                let j = spec.index(xx, yy, zz);
                if !seen[j] && imagined(j) && (cell_class(j) == wall) == structural {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            let (x, y, z) = (x as isize, y as isize, z as isize);
            push(x - 1, y, z);
            push(x + 1, y, z);
            push(x, y - 1, z);
            push(x, y + 1, z);
            push(x, y, z - 1);
            push(x, y, z + 1);
        }
        let mut totals = vec![0f64; cout - 1];
        for &i in &comp {
            for (t, h) in totals.iter_mut().zip(&head[i * cout + 1..(i + 1) * cout]) {
                *t += *h as f64;
            }
        }
        let mut best = 0;
        for c in 1..totals.len() {
            if totals[c] > totals[best] {
                best = c;
            }
        }
        for &i in &comp {
            out.semantics[i] = best as u8 + 1;
        }
    }
}

pub const IMAGINED_OPACITY: f64 = 0.8;

/// One imagined primitive per occupied cell that was not known: isotropic
/// σ = cell / 2, opacity 0.8, class color and class embedding. Cells without
/// a class use the generic label "object".
pub fn lift_to_gaussians(voxels: &VoxelBelief, provider: &EmbeddingProvider) -> Vec<GaussianPrimitive> {
    let spec = voxels.spec;
    let generic = provider.embed_label("object").expect("non-empty label");
    let mut out = Vec::new();
    for i in 0..voxels.len() {
        if voxels.known[i] || voxels.occupancy[i] < 0.5 {
            continue;
        }
        let c = voxels.semantics[i];
        let emb = provider.embed_class(c).unwrap_or_else(|| generic.clone());
        let [x, y, z] = spec.coords(i);
        let prim = GaussianPrimitive::isotropic(
            spec.center(x, y, z),
            spec.cell / 2.0,
            IMAGINED_OPACITY,
            class_color(c),
            emb.values().to_vec(),
            Origin::Imagined,
        )
        .expect("lifted primitive is valid");
        out.push(prim);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::denoiser::DenoiserConfig;
    use crate::geometry::Vec3;
    use crate::scene::SceneBelief;
    use rand::Rng;

    fn provider() -> EmbeddingProvider {
        EmbeddingProvider::synthetic(16)
    }

    fn spec8() -> GridSpec {
        GridSpec::window(0.0, 0.0, 8, 0.25)
    }

    fn observed_at(p: Vec3, label: &str, prov: &EmbeddingProvider) -> GaussianPrimitive {
        GaussianPrimitive::isotropic(p, 0.05, 1.0, [1.0, 0.0, 0.0], prov.embed_label(label).unwrap().values().to_vec(), Origin::Observed)
            .unwrap()
    }

    fn pseudo_trained(seed: u64) -> DenoiserParams {
        let mut d = DenoiserParams::init(DenoiserConfig::default(), seed);
        d.trained_steps = 1;
        d
    }

    #[test]
    fn rasterize_nothing_is_all_unknown() {
        let r = rasterize_observed(std::iter::empty(), spec8(), &FreeSpace::new(0.25), &provider()).unwrap();
        assert!(r.voxels.occupancy.iter().all(|o| *o == 0.5));
        assert_eq!(r.voxels.known_count(), 0);
    }

    #[test]
    fn rasterize_single_primitive() {
        let prov = provider();
        let spec = spec8();
        let c = spec.center(4, 4, 2);
        let r = rasterize_observed([&observed_at(c, "sofa", &prov)], spec, &FreeSpace::new(0.25), &prov).unwrap();
        let i = spec.index(4, 4, 2);
        assert_eq!(r.voxels.known_count(), 1);
        assert!(r.voxels.known[i] && r.voxels.occupancy[i] == 1.0);
        assert_eq!(r.voxels.semantics[i], class_id("sofa").unwrap());
    }

    #[test]
    fn rasterize_counts_out_of_bounds() {
        let prov = provider();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = spec8();
        let prims: Vec<GaussianPrimitive> = (0..200)
            .map(|_| observed_at(Vec3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-1.0..2.0)), "wall", &prov))
            .collect();
        let r = rasterize_observed(&prims, spec, &FreeSpace::new(0.25), &prov).unwrap();
        // independent bounds check
        let (lo, hi) = (Vec3::from(spec.origin), Vec3::from(spec.origin) + Vec3::new(2.0, 2.0, 1.25));
        let outside = prims
            .iter()
            .filter(|p| (0..3).any(|a| p.mean()[a] < lo[a] || p.mean()[a] >= hi[a]))
            .count();
        assert_eq!(r.out_of_bounds, outside);
    }

    #[test]
    fn rasterize_carved_cells_are_known_free() {
        let prov = provider();
        let spec = spec8();
        let mut free = FreeSpace::new(0.25);
        free.carve(&spec.center(0, 4, 2), &spec.center(7, 4, 2), true);
        let r = rasterize_observed([&observed_at(spec.center(7, 4, 2), "wall", &prov)], spec, &free, &prov).unwrap();
        for x in 0..7 {
            let i = spec.index(x, 4, 2);
            assert!(r.voxels.known[i] && r.voxels.occupancy[i] == 0.0);
        }
        assert_eq!(r.voxels.occupancy[spec.index(7, 4, 2)], 1.0);
        assert_eq!(r.voxels.known_count(), 8);
        assert!(matches!(
            rasterize_observed(std::iter::empty(), GridSpec::new([0.0; 3], 0.25, [0, 4, 4]), &free, &prov),
            Err(HypothesisError::EmptyGrid)
        ));
    }

    #[test]
    fn strided_timesteps_shape() {
        assert_eq!(strided_timesteps(50, 1), vec![50, 1]);
        let t = strided_timesteps(50, 8);
        assert_eq!(t[0], 50);
        assert_eq!(*t.last().unwrap(), 1);
        assert!(t.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(strided_timesteps(5, 50), vec![5, 4, 3, 2, 1]);
    }

    #[test]
    fn untrained_and_zero_k_rejected() {
        let cond = VoxelBelief::unknown(spec8());
        let s = NoiseSchedule::linear(1e-4, 0.1, 50).unwrap();
        let raw = DenoiserParams::init(DenoiserConfig::default(), 1);
        assert_eq!(
            sample_hypotheses(&cond, 1, &raw, &s, &SamplerConfig::default(), 0).unwrap_err(),
            HypothesisError::UntrainedDenoiser
        );
        assert_eq!(
            sample_hypotheses(&cond, 0, &pseudo_trained(1), &s, &SamplerConfig::default(), 0).unwrap_err(),
            HypothesisError::InvalidCount
        );
    }

    #[test]
    fn fully_known_grid_is_returned_unchanged() {
        let mut cond = VoxelBelief::unknown(spec8());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..cond.len() {
            cond.known[i] = true;
            cond.occupancy[i] = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
        }
        let s = NoiseSchedule::linear(1e-4, 0.1, 50).unwrap();
        let out = sample_hypotheses(&cond, 1, &pseudo_trained(2), &s, &SamplerConfig::default(), 4).unwrap();
        assert_eq!(out[0], cond);
    }

    #[test]
    fn samples_respect_known_cells_and_are_deterministic() {
        let mut cond = VoxelBelief::unknown(spec8());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in 0..cond.len() {
            if rng.gen_bool(0.5) {
                cond.known[i] = true;
                cond.occupancy[i] = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
            }
        }
        let s = NoiseSchedule::linear(1e-4, 0.1, 50).unwrap();
        let d = pseudo_trained(3);
        let a = sample_hypotheses(&cond, 3, &d, &s, &SamplerConfig::default(), 77).unwrap();
        let b = sample_hypotheses(&cond, 3, &d, &s, &SamplerConfig::default(), 77).unwrap();
        assert_eq!(a, b);
        for h in &a {
            for i in 0..cond.len() {
                if cond.known[i] {
                    assert_eq!(h.occupancy[i], cond.occupancy[i]);
                } else {
                    assert!(h.occupancy[i] == 0.0 || h.occupancy[i] == 1.0);
                    assert_eq!(h.semantics[i] != 0, h.occupancy[i] == 1.0);
                }
            }
        }
    }

    #[test]
    fn lift_counts_and_places() {
        let prov = provider();
        assert!(lift_to_gaussians(&all_free(spec8()), &prov).is_empty());
        let spec = spec8();
        let mut v = all_free(spec);
        let i = spec.index(2, 3, 1);
        v.known[i] = false;
        v.occupancy[i] = 1.0;
        v.semantics[i] = class_id("wall").unwrap();
        let prims = lift_to_gaussians(&v, &prov);
        assert_eq!(prims.len(), 1);
        assert_eq!(*prims[0].mean(), spec.center(2, 3, 1));
        assert!((prims[0].embedding()[0] - prov.embed_label("wall").unwrap().values()[0]).abs() < 1e-12);
        assert_eq!(prims[0].opacity(), IMAGINED_OPACITY);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..v.len() {
            v.known[i] = rng.gen_bool(0.4);
            v.occupancy[i] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
            v.semantics[i] = rng.gen_range(0..=12);
        }
        let expect = (0..v.len()).filter(|&i| v.occupancy[i] >= 0.5 && !v.known[i]).count();
        assert_eq!(lift_to_gaussians(&v, &prov).len(), expect);
    }

    #[test]
    fn pipeline_keeps_observed_part() {
        let prov = provider();
        let spec = spec8();
        let obs: Vec<GaussianPrimitive> = (0..5).map(|i| observed_at(spec.center(i, 2, 1), "table", &prov)).collect();
        let belief = SceneBelief {
            primitives: obs.clone(),
            ..SceneBelief::default()
        };
        let r = rasterize_observed(belief.observed(), spec, &FreeSpace::new(0.25), &prov).unwrap();
        let s = NoiseSchedule::linear(1e-4, 0.1, 50).unwrap();
        let hyps = sample_hypotheses(&r.voxels, 2, &pseudo_trained(4), &s, &SamplerConfig { steps: 3 }, 1).unwrap();
        for h in &hyps {
            let next = belief.replace_imagination(lift_to_gaussians(h, &prov)).unwrap();
            let (o, _) = next.partition();
            assert_eq!(o, obs);
        }
    }

    fn all_free(spec: GridSpec) -> VoxelBelief {
        let mut v = VoxelBelief::unknown(spec);
        v.known.iter_mut().for_each(|k| *k = true);
        v.occupancy.iter_mut().for_each(|o| *o = 0.0);
        v
    }
}
