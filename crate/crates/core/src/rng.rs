//! Deterministic seed derivation.
//!
//! Every random draw in this crate flows from a single `u64` seed through
//! named substreams, so results never depend on evaluation order or on any
//! process-global RNG state. Streams are derived with splitmix64, which is
//! stable across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One splitmix64 step.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `seed` and a stream label.
pub fn mix(seed: u64, label: &str) -> u64 {
    let mut h = splitmix64(seed);
    for b in label.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

/// Derive a child seed from `seed`, a stream label, and an index within the
/// stream (e.g. an example index or a replication number).
pub fn substream(seed: u64, label: &str, index: u64) -> u64 {
    splitmix64(mix(seed, label) ^ splitmix64(index))
}

/// Build a ChaCha8 generator from a derived seed.
pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
