//! Seeded substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream addressed by a
//! `(seed, stream)` pair. ChaCha is counter based, so two different stream ids
//! never overlap and a given stream can be regenerated in isolation, which is
//! what keeps parallel Monte-Carlo reductions independent of the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Returns the generator for substream `stream` of the root `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed from a root seed and a label (splitmix64 finalizer).
///
/// Used when a component needs its own root seed, for example the pattern bank
/// of a training run, so that unrelated consumers never share a stream.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
