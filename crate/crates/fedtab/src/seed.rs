//! Deterministic seed derivation.
//!
//! Every source of randomness in the crate is a ChaCha8 stream seeded from a
//! user-visible 64-bit seed plus a stream tag, so reruns are bit-identical and
//! independent of iteration or thread order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a stream tag (SplitMix64 finalizer).
pub fn derive(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives through a chain of tags, e.g. (seed, phase, client, round).
pub fn derive_chain(base: u64, streams: &[u64]) -> u64 {
    streams.iter().fold(base, |acc, s| derive(acc, *s))
}

/// Seeded generator for one derived stream.
pub fn rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, stream))
}

/// Seeded generator for a chained stream.
pub fn rng_chain(base: u64, streams: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_chain(base, streams))
}

/// Stream tags for the pipeline phases.
pub mod stream {
    pub const PARTITION: u64 = 1;
    pub const GMM: u64 = 2;
    pub const ENCODE: u64 = 3;
    pub const DP_NOISE: u64 = 4;
    pub const SYNTHESIS: u64 = 5;
    pub const TRAIN: u64 = 6;
    pub const METRICS: u64 = 7;
}
