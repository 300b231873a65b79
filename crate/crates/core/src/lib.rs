//! Differentiable face rendering and model fitting.
//!
//! The crate renders a textured face mesh under spherical-harmonics lighting
//! with a weak-perspective camera, computes analytic gradients of image and
//! landmark losses through the whole pipeline, and fits model parameters to a
//! target image by gradient descent.

pub mod camera;
pub mod error;
pub mod fit;
pub mod gradcheck;
pub mod io;
pub mod lighting;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod raster;
pub mod synthetic;
pub mod uv;

pub use error::{Error, Result};
