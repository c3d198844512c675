//! Denoiser training on ground-truth voxel grids.
//!
//! Each step draws one grid, crops a random window, hides everything that a
//! few random egocentric views would not have seen, corrupts the clean
//! occupancy with the forward process at a random timestep, and takes one Adam
//! step on the x̂0 regression plus class-head loss.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{HypothesisError, VoxelBelief};
use crate::diffusion::denoiser::{Adam, DenoiserConfig, DenoiserParams, GridDims, Targets, INPUT_CHANNELS};
use crate::diffusion::NoiseSchedule;
use crate::geometry::Vec3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Side of the square training window in cells.
    pub crop: usize,
    pub min_grids: usize,
    /// Steps averaged for the reported initial and final loss.
    pub loss_window: usize,
    /// Upper bound on simulated views per training example.
    pub max_views: usize,
    pub camera_height: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            learning_rate: 2e-3,
            crop: 16,
            min_grids: 100,
            loss_window: 100,
            max_views: 3,
            camera_height: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Total loss per step.
    pub losses: Vec<f64>,
    /// x̂0 regression part only.
    pub mse: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Cells a handful of random egocentric views would observe: ray-marched from
/// free standing positions at camera height through a 90° × 74° frustum,
/// stopping at the first occupied cell (which is itself seen).
pub fn view_mask(gt: &VoxelBelief, views: usize, camera_height: f64, rng: &mut impl Rng) -> Vec<bool> {
    let spec = gt.spec;
    let [nx, ny, nz] = spec.dims;
    let mut known = vec![false; gt.len()];
    let standable: Vec<(usize, usize)> = (0..ny)
        .flat_map(|y| (0..nx).map(move |x| (x, y)))
        .filter(|&(x, y)| (1..nz).all(|z| !gt.is_occupied(spec.index(x, y, z))))
        .collect();
    if standable.is_empty() {
        return known;
    }
    let step = spec.cell * 0.25;
    let max_range = 10.0;
    for _ in 0..views {
        let &(cx, cy) = standable.choose(rng).unwrap();
        let c = spec.center(cx, cy, 0);
        let eye = Vec3::new(c.x, c.y, camera_height);
        let yaw = rng.gen_range(0.0..2.0 * PI);
        let (n_az, n_el) = (24, 12);
        for a in 0..n_az {
            let az = yaw + (a as f64 + rng.gen::<f64>()) / n_az as f64 * (PI / 2.0) - PI / 4.0;
            for e in 0..n_el {
                let el = ((e as f64 + rng.gen::<f64>()) / n_el as f64 - 0.5) * 74f64.to_radians();
                let dir = Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin());
                let mut t = 0.0;
                while t < max_range {
                    let p = eye + dir * t;
                    let Some([x, y, z]) = spec.cell_of(&p) else {
                        break;
                    };
                    let i = spec.index(x, y, z);
                    known[i] = true;
                    if gt.is_occupied(i) {
                        break;
                    }
                    t += step;
                }
            }
        }
    }
    known
}

/// Trains a fresh denoiser. With `steps = 0` the initialization is returned
/// together with the loss of one evaluation batch.
pub fn train_denoiser(
    grids: &[VoxelBelief],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    net_cfg: DenoiserConfig,
    seed: u64,
) -> Result<(DenoiserParams, TrainReport), HypothesisError> {
    if grids.len() < cfg.min_grids {
        return Err(HypothesisError::InsufficientData {
            have: grids.len(),
            need: cfg.min_grids,
        });
    }
    let mut params = DenoiserParams::init(net_cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7EA1_7EA1);
    let mut opt = Adam::new(params.network.param_count(), cfg.learning_rate);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut mses = Vec::with_capacity(cfg.steps);
    let class_weight = params.config.class_weight;
    let n_steps = cfg.steps.max(1);
    for step in 0..n_steps {
        let ex = make_example(grids, schedule, cfg, &mut rng);
        let targets = Targets {
            x0: &ex.x0,
            class: &ex.class,
        };
        let (loss, mse, grad) = params.network.loss_and_grad(&ex.input, ex.dims, &targets, class_weight);
        losses.push(loss);
        mses.push(mse);
        if step < cfg.steps {
            let mut flat = params.network.flat_params();
            opt.step(&mut flat, &grad);
            params.network.set_flat_params(&flat);
        }
    }
    let w = cfg.loss_window.clamp(1, losses.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let initial_loss = mean(&losses[..w]);
    let final_loss = mean(&losses[losses.len() - w..]);
    params.trained_steps = cfg.steps as u64;
    params.initial_loss = Some(initial_loss);
    params.final_loss = Some(final_loss);
    if cfg.steps == 0 {
        losses.clear();
        mses.clear();
    }
    Ok((
        params,
        TrainReport {
            losses,
            mse: mses,
            initial_loss,
            final_loss,
        },
    ))
}

pub(crate) struct Example {
    pub input: Vec<f32>,
    pub x0: Vec<f64>,
    pub class: Vec<u8>,
    pub dims: GridDims,
}

pub(crate) fn make_example(grids: &[VoxelBelief], schedule: &NoiseSchedule, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Example {
    let g = &grids[rng.gen_range(0..grids.len())];
    let [nx, ny, _] = g.spec.dims;
    let (cx, cy) = (cfg.crop.min(nx), cfg.crop.min(ny));
    let x0 = rng.gen_range(0..=nx - cx);
    let y0 = rng.gen_range(0..=ny - cy);
    let crop = g.crop(x0, y0, cx, cy);
    let views = rng.gen_range(0..=cfg.max_views);
    let known = view_mask(&crop, views, cfg.camera_height, rng);
    let tau = rng.gen_range(1..=schedule.steps());
    let ab = schedule.alpha_bar(tau);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let n = crop.len();
    let y: Vec<f64> = crop.occupancy.iter().map(|o| if *o >= 0.5 { 1.0 } else { -1.0 }).collect();
    let mut input = Vec::with_capacity(n * INPUT_CHANNELS);
    let t_frac = (tau as f64 / schedule.steps() as f64) as f32;
    for i in 0..n {
        let e: f64 = StandardNormal.sample(rng);
        let k = known[i];
        input.extend([
            (a * y[i] + b * e) as f32,
            k as u8 as f32,
            if k { y[i] as f32 } else { 0.0 },
            t_frac,
        ]);
    }
    let class = crop
        .semantics
        .iter()
        .zip(&y)
        .map(|(c, yy)| if *yy > 0.0 { *c } else { 0 })
        .collect();
    let d = crop.spec.dims;
    Example {
        input,
        x0: y,
        class,
        dims: GridDims {
            nx: d[0],
            ny: d[1],
            nz: d[2],
        },
    }
}

/// Mean x̂0 error of `params` and of the constant-0.5 predictor over `n`
/// fresh examples: `(model_mse, baseline_mse)` in occupancy units.
pub fn heldout_mse(
    params: &DenoiserParams,
    grids: &[VoxelBelief],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cout = params.config.out_channels();
    let (mut model, mut base, mut count) = (0.0, 0.0, 0usize);
    for _ in 0..n {
        let ex = make_example(grids, schedule, cfg, &mut rng);
        let out = params.network.forward(&ex.input, ex.dims);
        for (i, y) in ex.x0.iter().enumerate() {
            let occ = (y + 1.0) / 2.0;
            let pred = ((out[i * cout] as f64).clamp(-1.0, 1.0) + 1.0) / 2.0;
            model += (pred - occ).powi(2);
            base += (0.5 - occ).powi(2);
            count += 1;
        }
    }
    (model / count as f64, base / count as f64)
}
