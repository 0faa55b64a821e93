//! Deterministic seed derivation. Every random stream in the crate is a
//! `ChaCha8Rng` seeded from a root seed and a stream label.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for `label` under `root`. FNV-1a over the label, mixed with the
/// root through splitmix64.
pub fn child_seed(root: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(root ^ splitmix64(h))
}

pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(child_seed(root, label))
}
