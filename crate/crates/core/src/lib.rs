//! Desk-scale cascade diffusion nowcasting of satellite brightness temperature.
//!
//! The crate generates synthetic multimodal sequence data (a cloud field plus
//! physical condition channels on a lat/lon grid), trains a conditional
//! denoising-diffusion model over merged time-channel inputs, rolls it out
//! autoregressively in a two-phase cascade, and verifies the forecasts with
//! latitude-weighted metrics against persistence and optical-flow baselines.

pub mod baselines;
pub mod cascade;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod network;
pub mod rng;

pub use error::{CoreError, Result};
