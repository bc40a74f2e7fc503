//! Adversarial purification for speaker verification: a small x-vector style
//! verifier, gradient attacks against it, a diffusion purifier, baseline
//! defenses, and the metrics that compare them.

pub mod asv;
pub mod attack;
pub mod audio;
pub mod defense;
pub mod diffusion;
mod error;
pub mod metrics;
pub mod seed;

pub use error::{Error, Result};
