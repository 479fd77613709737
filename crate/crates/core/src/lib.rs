//! Differentiable Gaussian splatting inside scattering media.
//!
//! The crate renders anisotropic Gaussian primitives with a volumetric
//! medium model (per-ray attenuation, backscatter and veiling color), and
//! optimizes them against images with trinocular stereo consistency,
//! triangulated depth priors, a depth residual and depth-aware opacity.

pub mod error;
pub mod grad;
pub mod hydrosim;
pub mod image;
pub mod io;
pub mod loss;
pub mod medium;
pub mod metrics;
pub mod projective;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
