//! Configurable multi-device storage trace synthesis.
//!
//! Traces are rasterised into two-channel time x device images, a
//! contrastively trained encoder maps numeric workload configurations into
//! the same embedding space as those images, and a conditional denoising
//! diffusion model generates new images from the configuration embedding.
//! Long traces are produced by outpainting successive segments.

pub mod checkpoint;
pub mod chip;
pub mod diffusion;
pub mod error;
pub mod fsutil;
pub mod metrics;
pub mod outpaint;
pub mod raster;
pub mod run_config;
pub mod seed;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
