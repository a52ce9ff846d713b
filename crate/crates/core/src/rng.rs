//! Independent, reproducible random streams.
//!
//! Every consumer of randomness (weight init, shuffling and augmentation,
//! k-means seeding, probe subsets) draws from its own ChaCha stream keyed by
//! the run seed, a stream tag and an index such as the epoch. Changing what one
//! consumer draws never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Kmeans = 3,
    Probe = 4,
    Synth = 5,
}

/// RNG for `(seed, stream, index)`.
pub fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) ^ index);
    rng
}
