//! A desk-scale laboratory for guidance-free noise refinement.
//!
//! A small class-conditional diffusion model is trained on synthetic 16x16
//! shapes. Guided sampling (classifier-free plus a degraded-predictor term)
//! produces target images; a residual refiner then learns to move the initial
//! Gaussian noise so that plain, unguided DDIM sampling lands on those
//! targets. The refiner is trained with multistep score distillation: the
//! denoiser's output is detached at every rollout step, so gradients only flow
//! through the linear part of each DDIM update.
//!
//! Module map:
//! - [`tensor`], [`rng`], [`schedule`], [`fft`]: numeric substrate
//! - [`nets`]: MLP denoiser / refiner, reverse-mode tape, Adam, checkpoints
//! - [`sampler`]: guided scores, DDIM / DDPM steps, denoise, fixed-point inversion
//! - [`training`]: shapes data, base training, pair generation, refiner training
//! - [`analysis`]: histograms, spectra, Jacobians, gradient-alignment and noise-distance checks, MMD
//! - [`config`]: the key=value run configuration
//! - [`acceptance`]: the end-to-end acceptance suite

pub mod acceptance;
pub mod analysis;
pub mod config;
pub mod error;
pub mod fft;
pub mod nets;
pub mod par;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use nets::{Condition, DenoiserNet, RefinerNet};
pub use rng::RngStream;
pub use schedule::NoiseSchedule;
pub use tensor::Tensor;
