//! Seeded randomness.
//!
//! Every random draw in the toolkit goes through [`SplitMix64`], a 64-bit
//! state generator (Steele, Lea & Flood) whose output sequence is identical
//! on every platform. Sub-streams are derived by mixing a base seed with
//! stable 64-bit hashes of names (utterance ids, epoch numbers).

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub type Rng = SplitMix64;

pub fn seeded(seed: u64) -> Rng {
    SplitMix64::seed_from_u64(seed)
}

/// FNV-1a over the UTF-8 bytes of `s`. Stable across platforms and releases.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for a named sub-stream: `seed ⊕ fnv1a(name)`.
pub fn derive(seed: u64, name: &str) -> u64 {
    seed ^ fnv1a(name)
}

/// Seed for an indexed sub-stream (epochs, iterations).
pub fn derive_index(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h = derive(seed, tag) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    // one splitmix finalizer round
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
