//! Differentiable search for fast samplers of pre-trained diffusion models.

pub mod checkpoint;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod ggdm;
pub mod rng;
pub mod samplers;
pub mod search;
pub mod tensorgrad;

pub use error::{Error, Result};
