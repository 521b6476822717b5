//! Seeded random streams.
//!
//! Every random draw in the simulator comes from a ChaCha8 generator keyed by
//! `(seed, stream)`, where the stream id names the consumer. Consumers never
//! share a generator, so adding a draw in one place cannot shift another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Named stream ids.
pub mod stream {
    pub const BASIS_LEFT: u64 = 1;
    pub const BASIS_RIGHT: u64 = 2;
    pub const ADAPTER_INIT: u64 = 3;
    pub const LORA_INIT: u64 = 4;
    pub const TASK_WEIGHTS: u64 = 10;
    pub const TASK_FEATURES: u64 = 11;
    pub const TASK_NOISE: u64 = 12;
    pub const PARTITION: u64 = 20;
    pub const PARTICIPATION: u64 = 30;
    pub const CLIENT_SHUFFLE: u64 = 40;
    pub const VERIFY: u64 = 50;
}

pub fn rng_for(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer; derives independent sub-seeds from structured keys.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for a `(seed, a, b)` key, e.g. `(seed, round, client)`.
pub fn derive(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(17))
}
