//! Deterministic seed derivation.
//!
//! Every random decision in the pipeline flows through a [`ChaCha8Rng`]
//! keyed by an explicit 64-bit seed. Child seeds (per epoch, per sample,
//! per purpose) are derived with SplitMix64 over the context words, so the
//! same (seed, context) pair yields the same stream on every platform —
//! nothing depends on process-local hashing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 step: advance by the golden-ratio increment and mix.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and ordered context words
/// (e.g. `[epoch, sample_index]` or a purpose tag).
pub fn derive_seed(parent: u64, words: &[u64]) -> u64 {
    let mut s = splitmix64(parent);
    for &w in words {
        s = splitmix64(s ^ w);
    }
    s
}

/// ChaCha8 stream for a derived (parent, context) seed.
pub fn rng_from(parent: u64, words: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(parent, words))
}
