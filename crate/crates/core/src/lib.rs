//! Single-image light-field synthesis with joint angular and spatial
//! super-resolution.
//!
//! A single center view is encoded once; an angular decoder predicts an
//! appearance flow per target view that warps a pre-shifted copy of the
//! input, and a spatial decoder adds two residual images on top of the
//! bilinearly upsampled result. Training uses the mean/variance light-field
//! losses instead of pixel-wise supervision.

pub mod error;
pub mod lfops;
pub mod lightfield;
pub mod losses;
pub mod model;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use lightfield::LightField;
