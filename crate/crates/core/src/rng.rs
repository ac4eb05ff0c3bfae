//! Seed derivation. Every random stream in a run descends from one `u64`
//! through labelled splits, so streams are independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for `label` under `seed`.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, then mixed with the parent.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(seed ^ splitmix(h))
}

/// Child seed for an indexed stream (`label`, `index`).
pub fn derive_indexed(seed: u64, label: &str, index: u64) -> u64 {
    splitmix(derive_seed(seed, label) ^ splitmix(index.wrapping_add(1)))
}

pub fn rng_for(seed: u64, label: &str) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, label))
}

pub fn rng_indexed(seed: u64, label: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_indexed(seed, label, index))
}
