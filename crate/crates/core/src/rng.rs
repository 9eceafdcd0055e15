//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! `u64`. Child seeds are derived from a parent seed plus a component name
//! and integer path with a SplitMix64-style mixer, so a single master seed
//! fixes every stream in an experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(GOLDEN);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// `hash(parent, name, path...)`, stable across platforms and releases.
pub fn derive_seed(parent: u64, name: &str, path: &[u64]) -> u64 {
    let mut h = splitmix(parent ^ fnv1a(name.as_bytes()));
    for &p in path {
        h = splitmix(h ^ p.wrapping_mul(GOLDEN));
    }
    h
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(parent: u64, name: &str, path: &[u64]) -> Rng {
    rng_from_seed(derive_seed(parent, name, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivation_separates_names_and_paths() {
        let a = derive_seed(7, "client", &[0, 1]);
        assert_eq!(a, derive_seed(7, "client", &[0, 1]));
        assert_ne!(a, derive_seed(7, "client", &[1, 0]));
        assert_ne!(a, derive_seed(7, "server", &[0, 1]));
        assert_ne!(a, derive_seed(8, "client", &[0, 1]));
    }
}
