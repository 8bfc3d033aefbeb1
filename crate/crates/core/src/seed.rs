//! Seed derivation and the crate's random generator.
//!
//! A master seed is expanded into independent sub-seeds with splitmix64
//! finalization, so every (round, client, purpose) triple gets its own
//! stream regardless of how many clients take part.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags mixed into derived seeds.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const TEST_DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const BACKBONE: u64 = 4;
    pub const HEAD: u64 = 5;
    pub const CLIENT: u64 = 6;
    pub const ADAPTER: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const PROXY: u64 = 9;
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// The splitmix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `master` one splitmix step at a time:
/// `s ← splitmix64(s ⊕ splitmix64(part))`.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |s, &p| splitmix64(s ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
