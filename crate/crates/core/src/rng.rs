//! Seeded random streams.
//!
//! Every unit of work (one input, one source model, one trained model) gets a
//! ChaCha stream keyed by `(seed, stream)`, so results never depend on the
//! order in which units are scheduled.

use rand::SeedableRng;
pub use rand_chacha::ChaCha8Rng as Stream;

pub fn stream(seed: u64, index: u64) -> Stream {
    let mut rng = Stream::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// A child seed for sub-experiment `tag` (e.g. one source model).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    stream(seed ^ 0x9e37_79b9_7f4a_7c15, tag).next_u64()
}
