//! Deterministic sub-seed derivation.
//!
//! Every random step (control matching, fold assignment, bootstraps, patient
//! generation) draws from its own generator seeded by mixing the run's master
//! seed with a stable key. Scheduling therefore never changes results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the bytes of `s`.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a sub-seed from `master` and an ordered list of key parts.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

/// Same as [`derive`], with a string label folded in first.
pub fn derive_labeled(master: u64, label: &str, parts: &[u64]) -> u64 {
    derive(derive(master, &[hash_str(label)]), parts)
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_is_stable_and_key_sensitive() {
        assert_eq!(derive(7, &[1, 2]), derive(7, &[1, 2]));
        assert_ne!(derive(7, &[1, 2]), derive(7, &[2, 1]));
        assert_ne!(derive(7, &[1]), derive(8, &[1]));
        assert_ne!(
            derive_labeled(7, "tree", &[0]),
            derive_labeled(7, "fold", &[0])
        );
        // FNV-1a reference value for "a".
        assert_eq!(hash_str("a"), 0xaf63_dc4c_8601_ec8c);
    }
}
