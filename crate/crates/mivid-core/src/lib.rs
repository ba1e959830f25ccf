//! Self-supervised video frame interpolation via masked conditional diffusion.
//!
//! The pipeline: ingest frame sequences ([`videodata`]), hide intermediate
//! frames with hybrid masking ([`masking`]), corrupt them through a forward
//! diffusion process and learn to denoise them with a spatiotemporal
//! noise-prediction network ([`diffusion`], [`model`]), trained under a
//! composite objective ([`losses`]) and evaluated with a frame-quality suite
//! ([`metrics`]). The [`engine`] module ties everything into a training loop
//! with checkpointing and an interpolation entry point.
//!
//! Everything is single-threaded and seeded: a fixed configuration and seed
//! reproduce runs bit-for-bit.

pub mod config;
pub mod diffusion;
pub mod engine;
pub mod error;
pub mod losses;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod videodata;

pub use error::{Error, Result};
