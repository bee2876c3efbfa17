//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator. The key comes from
//! `ChaCha8Rng::seed_from_u64(mix(seed, tag))` and the 64-bit stream id is
//! the item index, so sample `i` of a dataset can be drawn independently of
//! every other sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Stream `index` of the generator family `(seed, tag)`.
pub fn stream(seed: u64, tag: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, tag));
    rng.set_stream(index);
    rng
}

/// Stream tags. Distinct purposes never share a key.
pub mod tags {
    pub const TASK: u64 = 1;
    pub const SOURCE: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const EVAL_SOURCE: u64 = 4;
    pub const INIT: u64 = 10;
    pub const KMEANS: u64 = 11;
    pub const BATCH: u64 = 12;
    pub const DROPOUT: u64 = 13;
    pub const GRADCHECK: u64 = 20;
}
