//! Small 3D convolutional denoiser over voxel grids.
//!
//! Input channels: noisy occupancy `x_τ`, known mask, conditioned value, and
//! the normalized timestep `τ / T` broadcast as a constant channel. Output
//! channel 0 is the clean estimate `x̂_0`; the remaining channels are a class
//! head scored against one-hot class prototypes.
//!
//! Tensors are channel-last over a `(nx, ny, nz)` grid, voxel index
//! `(z * ny + y) * nx + x`. Convolutions use kernel 3 with zero padding 1.
//! Parameter files are flat f32 little-endian with a TOML layer manifest.

use std::io::{self, Read, Write};

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const INPUT_CHANNELS: usize = 4;
const KVOL: usize = 27;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    /// Weight of the class-head term in the training loss.
    pub class_weight: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: vec![8, 16, 8],
            num_classes: crate::semantic::NUM_CLASSES,
            class_weight: 0.5,
        }
    }
}

impl DenoiserConfig {
    pub fn out_channels(&self) -> usize {
        1 + self.num_classes
    }

    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut chans = vec![INPUT_CHANNELS];
        chans.extend(&self.hidden);
        chans.push(self.out_channels());
        chans.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One 3×3×3 convolution. Weights are laid out `[offset][cin][cout]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv3<T> {
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    pub layers: Vec<Conv3<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl GridDims {
    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Neighbor index tables: for each voxel, the 27 neighbor indices (or
/// `u32::MAX` outside the grid).
fn neighbor_table(d: GridDims) -> Vec<[u32; KVOL]> {
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.nz as isize {
        for y in 0..d.ny as isize {
            for x in 0..d.nx as isize {
                let mut nb = [u32::MAX; KVOL];
                let mut k = 0;
                for dz in -1..=1isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (xx, yy, zz) = (x + dx, y + dy, z + dz);
                            if xx >= 0
                                && yy >= 0
                                && zz >= 0
                                && (xx as usize) < d.nx
                                && (yy as usize) < d.ny
                                && (zz as usize) < d.nz
                            {
                                nb[k] = ((zz as usize * d.ny + yy as usize) * d.nx + xx as usize) as u32;
                            }
                            k += 1;
                        }
                    }
                }
                out.push(nb);
            }
        }
    }
    out
}

impl<T: Float + Send + Sync> Conv3<T> {
    fn forward(&self, input: &[T], nbrs: &[[u32; KVOL]], relu: bool) -> Vec<T> {
        let (cin, cout) = (self.cin, self.cout);
        let mut out = vec![T::zero(); nbrs.len() * cout];
        for (v, nb) in nbrs.iter().enumerate() {
            let o = &mut out[v * cout..(v + 1) * cout];
            o.copy_from_slice(&self.bias);
            for (off, &n) in nb.iter().enumerate() {
                if n == u32::MAX {
                    continue;
                }
                let src = &input[n as usize * cin..(n as usize + 1) * cin];
                let wbase = off * cin * cout;
                for (ci, &a) in src.iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    let wrow = &self.weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                    for (acc, &wv) in o.iter_mut().zip(wrow) {
                        *acc = *acc + a * wv;
                    }
                }
            }
            if relu {
                for x in o.iter_mut() {
                    if *x < T::zero() {
                        *x = T::zero();
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients; returns the input gradient when asked.
    fn backward(
        &self,
        input: &[T],
        grad_out: &[T],
        nbrs: &[[u32; KVOL]],
        gw: &mut [T],
        gb: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let (cin, cout) = (self.cin, self.cout);
        let mut gin = want_input_grad.then(|| vec![T::zero(); nbrs.len() * cin]);
        for (v, nb) in nbrs.iter().enumerate() {
            let g = &grad_out[v * cout..(v + 1) * cout];
            if g.iter().all(|x| *x == T::zero()) {
                continue;
            }
            for (b, &gv) in gb.iter_mut().zip(g) {
                *b = *b + gv;
            }
            for (off, &n) in nb.iter().enumerate() {
                if n == u32::MAX {
                    continue;
                }
                let n = n as usize;
                let wbase = off * cin * cout;
                for ci in 0..cin {
                    let a = input[n * cin + ci];
                    let wrow = &self.weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                    if a != T::zero() {
                        let gwrow = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (acc, &gv) in gwrow.iter_mut().zip(g) {
                            *acc = *acc + a * gv;
                        }
                    }
                    if let Some(gin) = gin.as_mut() {
                        let mut s = T::zero();
                        for (&wv, &gv) in wrow.iter().zip(g) {
                            s = s + wv * gv;
                        }
                        gin[n * cin + ci] = gin[n * cin + ci] + s;
                    }
                }
            }
        }
        gin
    }
}

/// Per-voxel regression and class targets for one training example.
pub struct Targets<'a> {
    /// Clean occupancy in [-1, 1].
    pub x0: &'a [f64],
    /// Class id per voxel (0 = none); class loss applies where `> 0`.
    pub class: &'a [u8],
}

impl<T: Float + Send + Sync> Network<T> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, input: &[T], dims: GridDims) -> Vec<T> {
        let nbrs = neighbor_table(dims);
        self.forward_cached(input, &nbrs).pop().expect("network has layers")
    }

    fn forward_cached(&self, input: &[T], nbrs: &[[u32; KVOL]]) -> Vec<Vec<T>> {
        let mut acts = vec![input.to_vec()];
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(acts.last().unwrap(), nbrs, i != last);
            acts.push(next);
        }
        acts
    }

    /// Training loss and the flat gradient (layer by layer, weights then bias).
    pub fn loss_and_grad(&self, input: &[T], dims: GridDims, targets: &Targets, class_weight: f64) -> (f64, f64, Vec<T>) {
        let nbrs = neighbor_table(dims);
        let acts = self.forward_cached(input, &nbrs);
        let out = acts.last().unwrap();
        let cout = self.layers.last().unwrap().cout;
        let n = dims.len();
        let ncls = cout - 1;
        let n_cls_vox = targets.class.iter().filter(|c| **c > 0).count();
        let mut grad = vec![T::zero(); n * cout];
        let mut mse = 0.0;
        let mut cls = 0.0;
        let inv_n = 1.0 / n as f64;
        let cls_scale = if n_cls_vox > 0 && ncls > 0 {
            class_weight / (n_cls_vox * ncls) as f64
        } else {
            0.0
        };
        for v in 0..n {
            let pred = out[v * cout].to_f64().unwrap();
            let d = pred - targets.x0[v];
            mse += d * d * inv_n;
            grad[v * cout] = T::from(2.0 * d * inv_n).unwrap();
            let c = targets.class[v] as usize;
            if c > 0 && cls_scale > 0.0 {
                for k in 0..ncls {
                    let t = if k + 1 == c { 1.0 } else { 0.0 };
                    let e = out[v * cout + 1 + k].to_f64().unwrap() - t;
                    cls += e * e * cls_scale;
                    grad[v * cout + 1 + k] = T::from(2.0 * e * cls_scale).unwrap();
                }
            }
        }
        let mut layer_grads: Vec<(Vec<T>, Vec<T>)> = self
            .layers
            .iter()
            .map(|l| (vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]))
            .collect();
        let mut g = grad;
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                // ReLU derivative on this layer's output
                for (gv, av) in g.iter_mut().zip(&acts[i + 1]) {
                    if *av <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            let (gw, gb) = &mut layer_grads[i];
            let gin = self.layers[i].backward(&acts[i], &g, &nbrs, gw, gb, i > 0);
            if let Some(gin) = gin {
                g = gin;
            }
        }
        let flat = layer_grads.into_iter().flat_map(|(w, b)| w.into_iter().chain(b)).collect();
        (mse + cls, mse, flat)
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) {
        let mut i = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[i..i + nw]);
            i += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[i..i + nb]);
            i += nb;
        }
    }

    pub fn cast<U: Float>(&self) -> Network<U> {
        Network {
            layers: self
                .layers
                .iter()
                .map(|l| Conv3 {
                    cin: l.cin,
                    cout: l.cout,
                    weights: l.weights.iter().map(|w| U::from(*w).unwrap()).collect(),
                    bias: l.bias.iter().map(|b| U::from(*b).unwrap()).collect(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

/// He-initialized network for a config.
pub fn init_network<T: Float>(config: &DenoiserConfig, seed: u64) -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = config.layer_shapes();
    let last = shapes.len() - 1;
    let layers = shapes
        .iter()
        .enumerate()
        .map(|(i, &(cin, cout))| {
            let fan_in = (KVOL * cin) as f64;
            let std = if i == last { 0.1 / fan_in.sqrt() } else { (2.0 / fan_in).sqrt() };
            let dist = Normal::new(0.0, std).unwrap();
            Conv3 {
                cin,
                cout,
                weights: (0..KVOL * cin * cout).map(|_| T::from(dist.sample(&mut rng)).unwrap()).collect(),
                bias: vec![T::zero(); cout],
            }
        })
        .collect();
    Network { layers }
}

/// Trained (or freshly initialized) denoiser with its training record.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub network: Network<f32>,
    pub trained_steps: u64,
    /// Mean x̂0 MSE over the first and last training windows.
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    trained_steps: u64,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    config: DenoiserConfig,
    layers: Vec<LayerManifest>,
}

#[derive(Serialize, Deserialize)]
struct LayerManifest {
    cin: usize,
    cout: usize,
    kernel: usize,
    weights: usize,
    bias: usize,
}

impl DenoiserParams {
    pub fn init(config: DenoiserConfig, seed: u64) -> Self {
        let network = init_network(&config, seed);
        Self {
            config,
            network,
            trained_steps: 0,
            initial_loss: None,
            final_loss: None,
        }
    }

    pub fn is_trained(&self) -> bool {
        self.trained_steps > 0
    }

    pub fn manifest_text(&self) -> String {
        let m = Manifest {
            format: "f32-le".into(),
            trained_steps: self.trained_steps,
            initial_loss: self.initial_loss,
            final_loss: self.final_loss,
            config: self.config.clone(),
            layers: self
                .network
                .layers
                .iter()
                .map(|l| LayerManifest {
                    cin: l.cin,
                    cout: l.cout,
                    kernel: 3,
                    weights: l.weights.len(),
                    bias: l.bias.len(),
                })
                .collect(),
        };
        toml::to_string_pretty(&m).expect("manifest serializes")
    }

    pub fn write_weights<W: Write>(&self, mut w: W) -> io::Result<()> {
        for v in self.network.flat_params() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(manifest: &str, mut weights: R) -> io::Result<Self> {
        let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
        let m: Manifest = toml::from_str(manifest).map_err(|e| bad(e.to_string()))?;
        if m.format != "f32-le" {
            return Err(bad(format!("unknown weight format {}", m.format)));
        }
        let mut network: Network<f32> = init_network(&m.config, 0);
        if network.layers.len() != m.layers.len()
            || network
                .layers
                .iter()
                .zip(&m.layers)
                .any(|(l, lm)| l.cin != lm.cin || l.cout != lm.cout || l.weights.len() != lm.weights)
        {
            return Err(bad("layer manifest disagrees with config".into()));
        }
        let mut buf = vec![0u8; network.param_count() * 4];
        weights.read_exact(&mut buf)?;
        let flat: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        network.set_flat_params(&flat);
        if !network.is_finite() {
            return Err(bad("non-finite weights".into()));
        }
        Ok(Self {
            config: m.config,
            network,
            trained_steps: m.trained_steps,
            initial_loss: m.initial_loss,
            final_loss: m.final_loss,
        })
    }
}

/// Adam over a flat parameter vector.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step<T: Float>(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i].to_f64().unwrap();
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let upd = self.lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps);
            params[i] = params[i] - T::from(upd).unwrap();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_example(dims: GridDims, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.len();
        let mut input = Vec::with_capacity(n * INPUT_CHANNELS);
        for _ in 0..n {
            let known = rng.gen_bool(0.5);
            input.extend([
                rng.gen_range(-1.5..1.5),
                if known { 1.0 } else { 0.0 },
                if known { rng.gen_range(-1.0..1.0) } else { 0.0 },
                0.4,
            ]);
        }
        let x0 = (0..n).map(|_| if rng.gen_bool(0.3) { 1.0 } else { -1.0 }).collect();
        let cls = (0..n).map(|_| rng.gen_range(0..4u8)).collect();
        (input, x0, cls)
    }

    #[test]
    fn layer_shapes_follow_config() {
        let c = DenoiserConfig::default();
        assert_eq!(
            c.layer_shapes(),
            vec![(4, 8), (8, 16), (16, 8), (8, 1 + crate::semantic::NUM_CLASSES)]
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let config = DenoiserConfig {
            hidden: vec![4, 6, 4],
            num_classes: 3,
            class_weight: 0.5,
        };
        let dims = GridDims { nx: 4, ny: 3, nz: 3 };
        let mut net: Network<f64> = init_network(&config, 11);
        // larger last layer so every term carries signal
        for w in net.layers.last_mut().unwrap().weights.iter_mut() {
            *w *= 10.0;
        }
        let (input, x0, cls) = random_example(dims, 12);
        let t = Targets { x0: &x0, class: &cls };
        let (_, _, grad) = net.loss_and_grad(&input, dims, &t, config.class_weight);
        let base = net.flat_params();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h = 1e-6;
        for _ in 0..32 {
            let i = rng.gen_range(0..base.len());
            let mut p = base.clone();
            p[i] += h;
            net.set_flat_params(&p);
            let lp = net.loss_and_grad(&input, dims, &t, config.class_weight).0;
            p[i] -= 2.0 * h;
            net.set_flat_params(&p);
            let lm = net.loss_and_grad(&input, dims, &t, config.class_weight).0;
            net.set_flat_params(&base);
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-7);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "coord {i}: fd {fd} vs analytic {}", grad[i]);
        }
    }

    #[test]
    fn manifest_round_trip() {
        let mut p = DenoiserParams::init(DenoiserConfig::default(), 3);
        p.trained_steps = 7;
        p.final_loss = Some(0.25);
        let mut bytes = Vec::new();
        p.write_weights(&mut bytes).unwrap();
        assert_eq!(bytes.len(), p.network.param_count() * 4);
        let back = DenoiserParams::load(&p.manifest_text(), &bytes[..]).unwrap();
        assert_eq!(back, p);
        assert!(DenoiserParams::load(&p.manifest_text(), &bytes[..10]).is_err());
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut x = vec![3.0f64, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * x[0], 2.0 * x[1]];
            opt.step(&mut x, &g);
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2);
    }
}
