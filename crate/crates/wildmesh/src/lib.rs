//! Textured 3D surface-mesh generation from collections of 2D images whose
//! camera poses are unknown.
//!
//! The crate is a desk-scale laboratory for the whole pipeline: a reverse-mode
//! autodiff tape ([`autodiff`]), a deformable tetrahedral surface
//! representation ([`tetgrid`]), a six-parameter camera with a learnable
//! sampling distribution and shape/camera compensation ([`camera`]), a
//! differentiable soft rasterizer ([`render`]), small generator and
//! discriminator networks ([`nets`]), adversarial and regularization losses
//! ([`losses`]), a four-phase training schedule ([`schedule`]), synthetic
//! dataset generation ([`datagen`]), and point-cloud evaluation metrics
//! ([`metrics`]).
//!
//! Everything is deterministic: any two runs with the same seed, config, and
//! binary produce bit-identical artifacts.

pub mod autodiff;
pub mod camera;
pub mod config;
pub mod datagen;
pub mod error;
pub mod fdcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod render;
pub mod schedule;
pub mod seeding;
pub mod tensor;
pub mod tetgrid;

pub use error::{Error, Result};
pub use tensor::Tensor;
