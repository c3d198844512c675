//! Explicit scene belief: Gaussian primitives split into observed and imagined parts.
//!
//! A [`SceneBelief`] is one sampled world hypothesis. Updates never mutate a
//! belief in place; they return a new snapshot. Observed primitives are
//! permanent once lifted (static-world assumption), imagined primitives are
//! dropped on every new observation and restored by [`SceneBelief::replace_imagination`].

mod io;

pub use io::{read_scene, scene_to_text, write_scene, SCENE_MAGIC, SCENE_VERSION};

use std::collections::HashSet;

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraPose, Mat3, Vec3};
use crate::image::ImageBuf;

/// Eigenvalue floor for primitive covariances (m²).
pub const COV_EIG_FLOOR: f64 = 1e-8;
/// Default side of the voxel hash used to deduplicate lifted primitives (m).
pub const DEFAULT_DEDUP_CELL: f64 = 0.10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BeliefError {
    #[error("covariance is not symmetric (max asymmetry {0:.3e})")]
    NonSymmetricCovariance(f64),
    #[error("opacity {0} outside [0, 1]")]
    OpacityOutOfRange(f64),
    #[error("embedding has zero or non-finite norm")]
    DegenerateEmbedding,
    #[error("non-finite primitive parameter")]
    NonFinite,
    #[error("observation has no valid pixels")]
    EmptyObservation,
    #[error("stride must be at least 1")]
    InvalidStride,
    #[error("primitive {0} is not flagged Imagined")]
    OriginMismatch(usize),
    #[error("no pixel is valid in both depth maps")]
    NoValidOverlap,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("embedding dimension {got} does not match belief dimension {expected}")]
    EmbeddingDim { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Origin {
    Observed,
    Imagined,
}

/// One belief atom: position, shape, opacity, flat color, and semantic embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    mean: Vec3,
    covariance: Mat3,
    opacity: f64,
    appearance: [f64; 3],
    embedding: Vec<f64>,
    origin: Origin,
}

impl GaussianPrimitive {
    /// Validating constructor. Eigenvalues of the covariance are clamped to
    /// [`COV_EIG_FLOOR`], opacity and color are clamped into [0, 1], and the
    /// embedding is renormalized.
    pub fn new(
        mean: Vec3,
        covariance: Mat3,
        opacity: f64,
        appearance: [f64; 3],
        embedding: Vec<f64>,
        origin: Origin,
    ) -> Result<Self, BeliefError> {
        if !mean.iter().all(|v| v.is_finite())
            || !covariance.iter().all(|v| v.is_finite())
            || !appearance.iter().all(|v| v.is_finite())
        {
            return Err(BeliefError::NonFinite);
        }
        let asym = (covariance - covariance.transpose()).abs().max();
        if asym > 1e-9 {
            return Err(BeliefError::NonSymmetricCovariance(asym));
        }
        if !(-1e-9..=1.0 + 1e-9).contains(&opacity) {
            return Err(BeliefError::OpacityOutOfRange(opacity));
        }
        let sym = 0.5 * (covariance + covariance.transpose());
        let covariance = clamp_covariance(sym);
        let embedding = normalized(embedding).ok_or(BeliefError::DegenerateEmbedding)?;
        Ok(Self {
            mean,
            covariance,
            opacity: opacity.clamp(0.0, 1.0),
            appearance: appearance.map(|c| c.clamp(0.0, 1.0)),
            embedding,
            origin,
        })
    }

    /// Rebuilds a stored primitive. Validates like [`Self::new`] but keeps the
    /// stored bits when they already satisfy the invariants, so a write/read
    /// cycle is lossless.
    pub(crate) fn from_stored(
        mean: Vec3,
        covariance: Mat3,
        opacity: f64,
        appearance: [f64; 3],
        embedding: Vec<f64>,
        origin: Origin,
    ) -> Result<Self, BeliefError> {
        let mut p = Self::new(mean, covariance, opacity, appearance, embedding.clone(), origin)?;
        let norm = embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() < 1e-9 {
            p.embedding = embedding;
        }
        if (p.covariance - covariance).abs().max() < 1e-12 && covariance == covariance.transpose() {
            p.covariance = covariance;
        }
        Ok(p)
    }

    /// Isotropic primitive with standard deviation `sigma`.
    pub fn isotropic(
        mean: Vec3,
        sigma: f64,
        opacity: f64,
        appearance: [f64; 3],
        embedding: Vec<f64>,
        origin: Origin,
    ) -> Result<Self, BeliefError> {
        let var = (sigma * sigma).max(COV_EIG_FLOOR);
        Self::new(mean, Mat3::from_diagonal_element(var), opacity, appearance, embedding, origin)
    }

    pub fn mean(&self) -> &Vec3 {
        &self.mean
    }
    pub fn covariance(&self) -> &Mat3 {
        &self.covariance
    }
    pub fn opacity(&self) -> f64 {
        self.opacity
    }
    pub fn appearance(&self) -> [f64; 3] {
        self.appearance
    }
    pub fn embedding(&self) -> &[f64] {
        &self.embedding
    }
    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn with_opacity(&self, opacity: f64) -> Self {
        Self {
            opacity: opacity.clamp(0.0, 1.0),
            ..self.clone()
        }
    }

    /// Same primitive with a different embedding (renormalized).
    pub fn with_embedding(&self, embedding: Vec<f64>) -> Result<Self, BeliefError> {
        Ok(Self {
            embedding: normalized(embedding).ok_or(BeliefError::DegenerateEmbedding)?,
            ..self.clone()
        })
    }
}

fn clamp_covariance(sym: Mat3) -> Mat3 {
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.iter().all(|&l| l >= COV_EIG_FLOOR) {
        return sym;
    }
    let lambda = eig.eigenvalues.map(|l| l.max(COV_EIG_FLOOR));
    let q = eig.eigenvectors;
    let m = q * Mat3::from_diagonal(&lambda) * q.transpose();
    0.5 * (m + m.transpose())
}

pub(crate) fn normalized(mut v: Vec<f64>) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n.is_finite() && n > 0.0) {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= n);
    Some(v)
}

/// Egocentric RGB-D-semantic frame. `depth` holds camera z-depth in meters with
/// 0 marking invalid pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub rgb: ImageBuf,
    pub depth: ImageBuf,
    pub semantic: ImageBuf,
    pub mask: Vec<bool>,
    pub pose: CameraPose,
}

impl Observation {
    pub fn new(
        rgb: ImageBuf,
        depth: ImageBuf,
        semantic: ImageBuf,
        mask: Vec<bool>,
        pose: CameraPose,
    ) -> Result<Self, BeliefError> {
        let (w, h) = (rgb.width, rgb.height);
        let shapes_ok = rgb.channels == 3
            && depth.channels == 1
            && depth.width == w
            && depth.height == h
            && semantic.width == w
            && semantic.height == h
            && mask.len() == w * h;
        if !shapes_ok {
            return Err(BeliefError::ShapeMismatch("observation images disagree in size".into()));
        }
        if mask.iter().zip(&depth.data).any(|(&m, &d)| !m && d != 0.0) {
            return Err(BeliefError::ShapeMismatch("invalid pixel carries non-zero depth".into()));
        }
        Ok(Self {
            rgb,
            depth,
            semantic,
            mask,
            pose,
        })
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// One sampled world hypothesis `z = z_o ∪ z_i`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct SceneBelief {
    pub primitives: Vec<GaussianPrimitive>,
    pub step: u64,
    pub hypothesis_id: u32,
    pub rng_seed: u64,
}

impl SceneBelief {
    pub fn new(rng_seed: u64) -> Self {
        Self {
            rng_seed,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Split into (observed, imagined), preserving relative order within each part.
    pub fn partition(&self) -> (Vec<GaussianPrimitive>, Vec<GaussianPrimitive>) {
        self.primitives
            .iter()
            .cloned()
            .partition(|p| p.origin == Origin::Observed)
    }

    pub fn observed(&self) -> impl Iterator<Item = &GaussianPrimitive> {
        self.primitives.iter().filter(|p| p.origin == Origin::Observed)
    }

    pub fn imagined(&self) -> impl Iterator<Item = &GaussianPrimitive> {
        self.primitives.iter().filter(|p| p.origin == Origin::Imagined)
    }

    /// Copy of this belief with the imagined part removed.
    pub fn observed_only(&self) -> SceneBelief {
        SceneBelief {
            primitives: self.observed().cloned().collect(),
            ..self.clone()
        }
    }

    /// Lift an observation into the observed part, drop all imagination, and
    /// advance the step, using the default dedup cell.
    pub fn incorporate_observation(&self, obs: &Observation, stride: usize) -> Result<SceneBelief, BeliefError> {
        self.incorporate_observation_with(obs, stride, DEFAULT_DEDUP_CELL)
    }

    /// Every `stride`-th valid pixel (in both axes) becomes an observed primitive
    /// with isotropic σ = 0.5 · depth · stride / fx, unless its `dedup_cell`
    /// voxel already holds an observed primitive.
    pub fn incorporate_observation_with(
        &self,
        obs: &Observation,
        stride: usize,
        dedup_cell: f64,
    ) -> Result<SceneBelief, BeliefError> {
        if stride == 0 {
            return Err(BeliefError::InvalidStride);
        }
        if obs.valid_count() == 0 {
            return Err(BeliefError::EmptyObservation);
        }
        let key = |p: &Vec3| {
            [
                (p.x / dedup_cell).floor() as i64,
                (p.y / dedup_cell).floor() as i64,
                (p.z / dedup_cell).floor() as i64,
            ]
        };
        let mut primitives: Vec<GaussianPrimitive> = self.observed().cloned().collect();
        let mut occupied: HashSet<[i64; 3]> = primitives.iter().map(|p| key(&p.mean)).collect();
        let fx = obs.pose.intrinsics.fx;
        let w = obs.width();
        for row in (0..obs.height()).step_by(stride) {
            for col in (0..w).step_by(stride) {
                let idx = row * w + col;
                let d = obs.depth.data[idx];
                if !obs.mask[idx] || d <= 0.0 {
                    continue;
                }
                let mean = obs.pose.unproject(col, row, d);
                if !occupied.insert(key(&mean)) {
                    continue;
                }
                let rgb = obs.rgb.at(idx);
                let sigma = 0.5 * d * stride as f64 / fx;
                let prim = GaussianPrimitive::isotropic(
                    mean,
                    sigma,
                    1.0,
                    [rgb[0], rgb[1], rgb[2]],
                    obs.semantic.at(idx).to_vec(),
                    Origin::Observed,
                );
                match prim {
                    Ok(p) => primitives.push(p),
                    // pixels without semantic features carry no usable embedding
                    Err(BeliefError::DegenerateEmbedding) => continue,
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(SceneBelief {
            primitives,
            step: self.step + 1,
            hypothesis_id: self.hypothesis_id,
            rng_seed: self.rng_seed,
        })
    }

    /// Observed part of this belief plus the given imagination; step unchanged.
    pub fn replace_imagination(&self, imagined: Vec<GaussianPrimitive>) -> Result<SceneBelief, BeliefError> {
        if let Some(i) = imagined.iter().position(|p| p.origin != Origin::Imagined) {
            return Err(BeliefError::OriginMismatch(i));
        }
        let mut primitives: Vec<GaussianPrimitive> = self.observed().cloned().collect();
        primitives.extend(imagined);
        Ok(SceneBelief {
            primitives,
            ..self.clone()
        })
    }
}

/// Per-sequence scale aligning predicted depth to sensed depth: the median of
/// `sensed / predicted` over pixels valid in both.
pub fn align_depth_scale(predicted: &[f64], sensed: &[f64], mask: &[bool]) -> Result<f64, BeliefError> {
    if predicted.len() != sensed.len() || predicted.len() != mask.len() {
        return Err(BeliefError::ShapeMismatch(format!(
            "predicted {}, sensed {}, mask {}",
            predicted.len(),
            sensed.len(),
            mask.len()
        )));
    }
    let mut ratios: Vec<f64> = predicted
        .iter()
        .zip(sensed)
        .zip(mask)
        .filter(|((p, s), m)| **m && **p > 1e-6 && **s > 0.0 && s.is_finite() && p.is_finite())
        .map(|((p, s), _)| s / p)
        .collect();
    if ratios.is_empty() {
        return Err(BeliefError::NoValidOverlap);
    }
    ratios.sort_by(f64::total_cmp);
    let n = ratios.len();
    Ok(if n % 2 == 1 {
        ratios[n / 2]
    } else {
        0.5 * (ratios[n / 2 - 1] + ratios[n / 2])
    })
}
