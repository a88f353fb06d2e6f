//! Simulation and evaluation around the reconstruction model.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod imageio;
pub mod mask;
pub mod metrics;
pub mod phantom;
pub mod plot;
pub mod train;

pub use mask::{gaussian1d_mask, undersample, SamplingMask};
pub use metrics::{mae, psnr, ssim};
pub use phantom::{phantom_generate, Phantom};
