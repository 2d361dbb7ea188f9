//! Deterministic seed derivation.
//!
//! Every derived stream (per-patient phantoms, per-repetition shuffles,
//! per-fold initialisations, per-epoch batch orders) is keyed by mixing the
//! master seed with small integers through SplitMix64, which is stable across
//! platforms and toolchains unlike `std`'s hashers.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a sequence of keys into one seed.
pub fn mix(keys: &[u64]) -> u64 {
    keys.iter().fold(0x6D70_726B_6974_u64, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Stable hash of a string identifier.
pub fn hash_str(s: &str) -> u64 {
    // FNV-1a
    s.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3))
}

/// The RNG used for every stochastic step in the crate.
pub fn rng(keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(keys))
}
