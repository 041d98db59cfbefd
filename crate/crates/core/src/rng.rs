//! Seed derivation. Every random component draws from a named substream of
//! one root seed so that components can be varied independently.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Deterministic child seed for `(root, name, index)`.
pub fn derive_seed(root: u64, name: &str, index: u64) -> u64 {
    splitmix(splitmix(root ^ fnv1a(name)).wrapping_add(index))
}

pub fn substream(root: u64, name: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(root, name, 0))
}

pub fn from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
