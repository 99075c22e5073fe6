//! Multi-spectral (RGB / NIR / thermal) monocular depth estimation with
//! geometry-guided contrastive alignment and an attachable fusion module.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod params;
pub mod spectrum;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use spectrum::Spectrum;
