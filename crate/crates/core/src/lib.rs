//! Tuning-free face personalization for a toy latent-diffusion model.

pub mod adapters;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod face;
pub mod fixture;
pub mod inference;
pub mod injection;
pub mod losses;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
