//! Generative 3D belief engine for embodied navigation under partial observability.
//!
//! A scene is held as a set of Gaussian primitives split into an observed part
//! (lifted from sensor data) and an imagined part (sampled completions of unseen
//! space). Imagination is produced by a conditional denoising-diffusion sampler
//! over coarse voxel grids and lifted back into primitives; the splatting
//! renderer turns any hypothesis into RGB, depth, and semantic-feature images.
//! On top of that sit a belief-guided object-navigation planner, a procedural
//! indoor simulator, and the completion/permanence benchmark.

pub mod bench;
pub mod cli;
pub mod config;
pub mod diffusion;
pub mod geometry;
pub mod hypothesis;
pub mod image;
pub mod planner;
pub mod render;
pub mod scene;
pub mod semantic;
pub mod world;

pub use geometry::{CameraPose, Intrinsics, Mat3, Vec3};
pub use scene::{GaussianPrimitive, Observation, Origin, SceneBelief};
