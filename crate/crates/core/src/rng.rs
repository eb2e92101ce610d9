//! Seed splitting.
//!
//! Every random draw in a run comes from `ChaCha8Rng::seed_from_u64(seed)`
//! with the stream number set to a fixed purpose id, so changing how many
//! numbers one consumer draws never shifts another consumer's sequence.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_COLLOCATION: u64 = 1;
pub const STREAM_OBSERVATION_POINTS: u64 = 2;
pub const STREAM_OBSERVATION_NOISE: u64 = 3;
pub const STREAM_SIMULATION: u64 = 4;
pub const STREAM_PARAMETER_INIT: u64 = 5;
pub const STREAM_NETWORK_INIT: u64 = 6;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derived seed for the `k`-th independent job of a run.
pub fn job_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
