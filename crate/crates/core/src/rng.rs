//! Seeded random streams. Every stochastic routine takes one of these so a run
//! is reproducible from a single `u64` seed.

use rand::SeedableRng;

pub type SeededRng = rand_chacha::ChaCha8Rng;

/// Independent stream `stream` derived from `seed`.
pub fn stream(seed: u64, stream: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
