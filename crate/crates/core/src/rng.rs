//! Seed derivation for reproducible random streams.
//!
//! Every random quantity in the crate comes from a [`ChaCha8Rng`] whose seed
//! is derived from the user's master seed and a path of integer tags
//! (stream domain, replicate index, draw index, ...). Derivation folds each
//! tag into the state with the SplitMix64 finalizer:
//!
//! ```text
//! state = mix(master ^ 0x9E3779B97F4A7C15)
//! for tag in path: state = mix(state ^ mix(tag + 0x9E3779B97F4A7C15 * (position + 1)))
//! ```
//!
//! ChaCha8 output and the derivation above are platform independent, so a
//! given `(seed, path)` yields the same stream everywhere and independent of
//! how work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// Top-level stream domains. Keeping them distinct means, e.g., the data
/// generator never shares a stream with the posterior sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dgp = 1,
    Sampler = 2,
    Design = 3,
    Analysis = 4,
    Replicate = 5,
}

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a tag path.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    let mut state = mix(seed ^ GOLDEN);
    for (pos, tag) in path.iter().enumerate() {
        let salt = GOLDEN.wrapping_mul(pos as u64 + 1);
        state = mix(state ^ mix(tag.wrapping_add(salt)));
    }
    state
}

/// Seed for a stream domain plus extra tags.
pub fn stream_seed(seed: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut full = Vec::with_capacity(path.len() + 1);
    full.push(stream as u64);
    full.extend_from_slice(path);
    derive(seed, &full)
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: Stream, path: &[u64]) -> ChaCha8Rng {
    rng_from(stream_seed(seed, stream, path))
}
