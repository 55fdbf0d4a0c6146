//! Style-conditioned flexible super-resolution.
//!
//! A single generator is trained under an objective whose loss weights depend
//! on a style value `t` in `[0, 1]`. At inference a per-pixel style map picks
//! the reconstruction style locally, from distortion-oriented to
//! perception-oriented (or across feature spaces for the diversity variant).

pub mod adversarial;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod generator;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod perceptual;
pub mod raster;
pub mod resample;
pub mod schedules;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
