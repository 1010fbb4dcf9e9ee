//! Deterministic seed derivation.
//!
//! Every random stream in an experiment is a ChaCha stream whose seed is
//! derived from the master seed and a fixed tag path, so runs are
//! reproducible bit-for-bit regardless of evaluation order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; statistically independent outputs for distinct inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `base` and a tag path.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut state = mix(base);
    for &t in tags {
        state = mix(state ^ mix(t));
    }
    state
}

pub fn rng_from(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags used throughout the crate; kept in one place so no two
/// subsystems collide.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const INIT: u64 = 4;
    pub const CLIENT: u64 = 5;
    pub const TRAJECTORY_CLUSTER: u64 = 6;
    pub const SYNGEN: u64 = 7;
    pub const ATTACK: u64 = 8;
    pub const DP_NOISE: u64 = 9;
    pub const SELECTION: u64 = 10;
}
