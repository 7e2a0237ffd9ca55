//! Hybrid β-VAE/GAN with differentiable data augmentation for two-phase
//! microstructure reconstruction, with two-point-correlation error metrics.

pub mod augment;
pub mod cli;
pub mod autodiff;
pub mod data;
pub mod descriptors;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod models;
pub mod rng;
pub mod trainer;

pub use autodiff::{Tape, Tensor, Var};
pub use error::{Error, Result};
