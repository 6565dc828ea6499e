//! Volumetric multi-class segmentation with feature-guided attention and
//! voxel-level curriculum learning, plus the synthetic-phantom data tooling
//! and evaluation metrics needed to exercise the full training pipeline at
//! desk scale.

pub mod autodiff;
pub mod error;
pub mod partition;
pub mod volume;

pub use error::{Error, Result};
