//! Seed derivation for reproducible, splittable random streams.
//!
//! Every stochastic routine takes an explicit generator. Independent streams
//! are obtained by mixing a master seed with a path of integer tags, so the
//! same `(seed, tags)` always yields the same stream regardless of the order
//! in which streams are created.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator used throughout the crate.
pub type DetRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from `master` and a path of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix64(master), |acc, &t| mix64(acc ^ mix64(t)))
}

/// Generator for the stream identified by `(master, tags)`.
pub fn stream(master: u64, tags: &[u64]) -> DetRng {
    DetRng::seed_from_u64(derive_seed(master, tags))
}

/// Stable 64-bit tag for a string label.
pub fn label_tag(label: &str) -> u64 {
    let lo = crc32fast::hash(label.as_bytes()) as u64;
    let hi = crc32fast::hash(&[label.as_bytes(), b"#"].concat()) as u64;
    (hi << 32) | lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).gen();
        let b: u64 = stream(7, &[1, 2]).gen();
        let c: u64 = stream(7, &[2, 1]).gen();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
