//! Hyperbolic-geometry-guided diffusion for temporal action segmentation.

pub mod error;
pub mod geometry;
pub mod check;
pub mod diffusion;
pub mod tensorgrad;
pub mod losses;
pub mod optim;
pub mod metrics;
pub mod model;
pub mod data;
pub mod trainer;

pub use error::{Error, Result};
