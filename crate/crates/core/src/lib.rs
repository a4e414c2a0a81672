//! Multi-view super-resolution for low-dose 4D-STEM.
//!
//! A scan is simulated or loaded as a [`DataCube4D`], corrupted to a target
//! electron dose, split into virtual bright-field views and fused by an
//! attention-gated encoder-decoder into a 3x upsampled phase image. Classical
//! reconstructions and image-quality metrics live alongside for comparison.

pub mod baselines;
pub mod corruption;
pub mod datacube;
pub mod error;
mod fft;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod multiview;
pub mod network;
pub mod pipeline;
pub mod resample;
pub mod simulator;

pub use datacube::{DataCube4D, Layout, ScanCalibration};
pub use error::{Error, Result};
