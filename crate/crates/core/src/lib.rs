//! Treatment-aware conditional diffusion for longitudinal lesion growth.
//!
//! Given three source sessions of a multi-channel 2D image with their
//! treatment/day labels, a conditional DDPM generates the image at a future
//! treatment/day point and, through a second output head, segments the lesion
//! on every session. The crate covers the full pipeline at desk scale:
//!
//! - [`schedule`]: linear variance schedule and derived coefficient tables
//! - [`diffusion`]: forward noising, posterior means, x0/eps conversions
//! - [`denoiser`]: the conditional U-shaped network with manual backprop
//! - [`losses`]: dice, noise-weighted segmentation loss, spatial weight map
//! - [`trainer`]: episode sampling, Adam with warmup-cosine, checkpoints
//! - [`sampler`]: ancestral sampling with mask fusion and ensembles
//! - [`data`]: cases on disk, the TGV array format, synthetic lesion cases
//! - [`metrics`]: DSC, RVD, SSIM, PSNR, MSE and report aggregation
//! - [`cli`]: run configuration and the command implementations

pub mod cli;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
