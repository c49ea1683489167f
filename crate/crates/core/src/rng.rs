//! Deterministic seed derivation for per-item generators.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mix a master seed with a stream tag and an item index.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(stream)) ^ index)
}

pub fn item_rng(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Uniform number in `[0, 1)` that is a pure function of its arguments.
pub fn hash_unit(master: u64, stream: u64, index: u64) -> f64 {
    (derive_seed(master, stream, index) >> 11) as f64 / (1u64 << 53) as f64
}

pub mod streams {
    pub const LINES: u64 = 1;
    pub const THETA: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const CALIBRATION: u64 = 6;
}
