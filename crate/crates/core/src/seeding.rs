//! Deterministic seed derivation.
//!
//! Every random draw in a protocol run comes from a generator seeded by
//! hashing the loop indices with the run's base seed, so results do not
//! depend on worker count or execution order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with an ordered list of tags into a new seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Stable numeric tag for a string label.
pub fn tag(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Order-sensitive fingerprint of index lists.
pub fn hash_indices<'a>(parts: impl IntoIterator<Item = &'a [usize]>) -> u64 {
    let mut h = 0x5851_F42D_4C95_7F2Du64;
    for (p, part) in parts.into_iter().enumerate() {
        h = splitmix64(h ^ (p as u64).wrapping_add(0xA5A5));
        for &i in part {
            h = splitmix64(h ^ i as u64);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derived_seeds_depend_on_every_tag() {
        let a = derive_seed(7, &[1, 2, 3]);
        assert_eq!(a, derive_seed(7, &[1, 2, 3]));
        assert_ne!(a, derive_seed(7, &[1, 2, 4]));
        assert_ne!(a, derive_seed(7, &[2, 1, 3]));
        assert_ne!(a, derive_seed(8, &[1, 2, 3]));
    }

    #[test]
    fn index_hash_is_order_sensitive() {
        let x = [1usize, 2, 3];
        let y = [3usize, 2, 1];
        assert_ne!(hash_indices([&x[..]]), hash_indices([&y[..]]));
        assert_ne!(
            hash_indices([&x[..], &y[..]]),
            hash_indices([&y[..], &x[..]])
        );
    }
}
