//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent ChaCha stream `stream` under `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// Stream ids used across the crate.
pub const GENERATOR_INIT: u64 = 1;
pub const LATENT_INIT: u64 = 2;
pub const SWING: u64 = 3;
pub const LATENT_RESAMPLE: u64 = 4;
pub const CALIB_SHUFFLE: u64 = 5;
pub const QDROP: u64 = 6;
