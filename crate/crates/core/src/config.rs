//! Run configuration: one TOML file with a section per subsystem. Every
//! section and key is optional; unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::BenchConfig;
use crate::diffusion::denoiser::{DenoiserConfig, DenoiserParams};
use crate::diffusion::NoiseSchedule;
use crate::hypothesis::TrainConfig;
use crate::planner::{EpisodeSpec, NavConfig};
use crate::semantic::{EmbeddingMode, EmbeddingProvider, DEFAULT_EMBED_DIM};
use crate::world::{Sensor, WorldConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub dim: usize,
    /// External embedding service; the synthetic hash embedding when unset.
    /// `BELIEF_EMBED_URL` takes over when this is unset.
    pub url: Option<String>,
    pub timeout_ms: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
            url: None,
            timeout_ms: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    /// Manifest of a trained denoiser; weights live next to it with a `.bin`
    /// extension.
    pub path: Option<PathBuf>,
    /// Procedural worlds whose ground-truth grids make up the training set.
    pub train_worlds: usize,
    pub network: DenoiserConfig,
    pub training: TrainConfig,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            path: None,
            train_worlds: 120,
            network: DenoiserConfig::default(),
            training: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSection {
    pub count: usize,
    pub min_shortest: f64,
}

impl Default for EpisodeSection {
    fn default() -> Self {
        let e = EpisodeSpec::default();
        Self {
            count: e.episodes,
            min_shortest: e.min_shortest,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchModel {
    #[default]
    ObservedOnly,
    Generative,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub model: BenchModel,
    pub object_tasks: usize,
    pub visibilities: Vec<f64>,
    pub room_tasks: usize,
    pub permanence_tasks: usize,
    pub pixel_stride: usize,
    pub window: usize,
    pub match_cosine: f64,
}

impl Default for BenchSection {
    fn default() -> Self {
        let b = BenchConfig::default();
        Self {
            model: BenchModel::default(),
            object_tasks: b.object_tasks,
            visibilities: b.visibilities,
            room_tasks: b.room_tasks,
            permanence_tasks: b.permanence_tasks,
            pixel_stride: b.pixel_stride,
            window: b.window,
            match_cosine: b.match_cosine,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub embedding: EmbeddingSection,
    pub world: WorldConfig,
    pub sensor: Sensor,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub navigation: NavConfig,
    pub episodes: EpisodeSection,
    pub bench: BenchSection,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let nav = &self.navigation;
        if nav.k == 0 {
            return Err(invalid("navigation.k", "must be at least 1"));
        }
        if nav.t_exec == 0 {
            return Err(invalid("navigation.t_exec", "must be at least 1"));
        }
        nav.validate().map_err(|e| invalid("navigation", e.to_string()))?;
        self.world.validate().map_err(|e| invalid("world", e.to_string()))?;
        if self.embedding.dim == 0 {
            return Err(invalid("embedding.dim", "must be positive"));
        }
        if self.sensor.width == 0 || self.sensor.height == 0 {
            return Err(invalid("sensor", "image size must be positive"));
        }
        if !(self.sensor.hfov_deg > 0.0 && self.sensor.hfov_deg < 180.0) {
            return Err(invalid("sensor.hfov_deg", "must lie in (0, 180)"));
        }
        self.schedule().map_err(|e| invalid("schedule", e))?;
        self.bench_config()
            .validate()
            .map_err(|e| invalid("bench", e.to_string()))?;
        if let Some(p) = &self.denoiser.path {
            for f in [p.clone(), weights_path(p)] {
                if !f.is_file() {
                    return Err(invalid("denoiser.path", format!("{} does not exist", f.display())));
                }
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, String> {
        let s = &self.schedule;
        NoiseSchedule::linear(s.beta_start, s.beta_end, s.steps).map_err(|e| e.to_string())
    }

    pub fn provider(&self) -> EmbeddingProvider {
        let e = &self.embedding;
        match &e.url {
            Some(url) => EmbeddingProvider::with_mode(
                EmbeddingMode::ExternalService {
                    url: url.clone(),
                    timeout_ms: e.timeout_ms,
                },
                e.dim,
            ),
            None => EmbeddingProvider::from_env(e.dim),
        }
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            world: self.world.clone(),
            episodes: self.episodes.count,
            seed: self.seed,
            min_shortest: self.episodes.min_shortest,
        }
    }

    pub fn bench_config(&self) -> BenchConfig {
        let b = &self.bench;
        BenchConfig {
            world: self.world.clone(),
            sensor: self.sensor.clone(),
            seed: self.seed,
            object_tasks: b.object_tasks,
            visibilities: b.visibilities.clone(),
            room_tasks: b.room_tasks,
            permanence_tasks: b.permanence_tasks,
            pixel_stride: b.pixel_stride,
            window: b.window,
            band: self.navigation.band,
            match_cosine: b.match_cosine,
        }
    }
}

/// Weights file belonging to a denoiser manifest.
pub fn weights_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn load_denoiser(manifest: &Path) -> std::io::Result<DenoiserParams> {
    let text = fs::read_to_string(manifest)?;
    DenoiserParams::load(&text, fs::File::open(weights_path(manifest))?)
}

pub fn save_denoiser(params: &DenoiserParams, manifest: &Path) -> std::io::Result<()> {
    fs::write(manifest, params.manifest_text())?;
    params.write_weights(std::io::BufWriter::new(fs::File::create(weights_path(manifest))?))
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    RunConfig::from_toml(&text)
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<(), ConfigError> {
    fs::write(path, cfg.to_toml()).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })
}
