//! Seed derivation. Every random decision in a run draws from a generator
//! keyed by the run seed plus a fixed tuple of tags, so results do not depend
//! on the order in which unrelated components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Tags naming independent random streams.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Partition = 2,
    ModelInit = 3,
    Sigma = 4,
    Prototype = 5,
    Distill = 6,
    Sampling = 7,
    Training = 8,
    Availability = 9,
    Augment = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and extra indices (round, client, ...).
pub fn derive_seed(seed: u64, stream: Stream, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ splitmix64(stream as u64));
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(seed: u64, stream: Stream, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, tags))
}
