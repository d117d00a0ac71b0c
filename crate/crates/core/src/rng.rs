//! Seed derivation for independent random streams.
//!
//! Every stream is keyed by a tuple of integers (master seed, sample index,
//! band index, ...) hashed with SplitMix64, then fed to ChaCha8. The output
//! of a stream depends only on its key, so work can be split across threads
//! in any order without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a stream key into a 64-bit seed.
pub fn stream_seed(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x6A09_E667_F3BC_C909, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(key: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(key))
}
