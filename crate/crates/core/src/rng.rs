//! Seeded RNG streams.
//!
//! Every random draw in a run comes from a ChaCha8 stream keyed by the run seed
//! plus a purpose tag and indices, so parallel workers stay reproducible
//! regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags that keep independent consumers on disjoint streams.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const ROLLOUT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const CORPUS: u64 = 5;
    pub const WEIGHER_INIT: u64 = 6;
    pub const SCORER: u64 = 7;
    pub const EVAL: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, tag, indices...)`.
pub fn stream(seed: u64, tag: u64, indices: &[u64]) -> Rng {
    let mut key = splitmix64(seed ^ splitmix64(tag));
    for &i in indices {
        key = splitmix64(key ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    ChaCha8Rng::seed_from_u64(key)
}

/// A `u64` seed derived from `(seed, tag, index)`, for APIs that take a seed.
pub fn stream_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed ^ splitmix64(tag)) ^ splitmix64(index))
}
