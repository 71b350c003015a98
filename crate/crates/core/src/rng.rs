//! Counter-based seed derivation. Every random stream is keyed by a master
//! seed and a path of counters, so results do not depend on execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for stream `counter` under `seed`.
pub fn derive_seed(seed: u64, counter: u64) -> u64 {
    mix64(mix64(seed) ^ counter.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn seeded_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, counter))
}
