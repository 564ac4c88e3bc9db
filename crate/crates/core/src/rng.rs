//! Counter-based randomness: every consumer derives an independent ChaCha
//! stream from `(seed, stream)`, so per-sample generation is order
//! independent.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use rand::Rng;
pub type StreamRng = ChaCha8Rng;

/// Stream ids reserved for distinct purposes under one seed.
pub mod streams {
    pub const PARAM_INIT: u64 = 1 << 40;
    pub const SHUFFLE: u64 = 2 << 40;
    pub const SAMPLE: u64 = 3 << 40;
}

pub fn stream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Uniform draw from `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}
