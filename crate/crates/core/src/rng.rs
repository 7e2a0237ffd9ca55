//! Seeded random streams.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::Tensor;

/// The generator used throughout; reproducible across platforms.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Tensor of i.i.d. `N(0, std²)` entries.
pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = std * standard_normal(rng);
    }
    t
}

/// Tensor of i.i.d. entries uniform on `[lo, hi)`.
pub fn uniform_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.random_range(lo..hi);
    }
    t
}
