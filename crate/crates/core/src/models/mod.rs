//! Encoder, mutual generator and discriminator built from architecture specs.

mod arch;
pub mod checkpoint;
mod hybrid;
mod network;

pub use arch::{Activation, ArchSpec, LayerKind, LayerSpec};
pub use hybrid::{reparametrize, sample_noise, HybridModel, LatentDist};
pub use network::{BatchStats, Block, Bound, Mode, Network, INIT_STD};

#[cfg(test)]
mod tests;
