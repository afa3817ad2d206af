//! Deterministic derivation of per-component RNG streams from one run seed.
//!
//! Every randomized stage of the pipeline (parameter init, shuffling, the
//! simulator's per-day draws, subsampling, ...) gets its own stream derived
//! from the run seed and a string label. Two rules keep runs reproducible:
//!
//! 1. the derivation is a pure function of `(seed, label)` — adding a new
//!    consumer never perturbs existing streams, and
//! 2. labels are unique per consumer and stable across releases.
//!
//! Derivation is FNV-1a over the little-endian seed bytes, a zero separator
//! and the label bytes. FNV is not cryptographic, which is fine: we need
//! decorrelated ChaCha seeds, not secrecy, and ChaCha does the mixing.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Collapse `(seed, label)` into a child seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h ^= 0;
    h = h.wrapping_mul(FNV_PRIME);
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// RNG stream for one named consumer of the run seed.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
