//! Seed derivation. Every random draw in the crate comes from a ChaCha
//! stream keyed on `(seed, domain, index)` so results do not depend on
//! scheduling or platform word size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, domain, index)` triple.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed ^ splitmix64(domain)) ^ index);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(domain);
    rng
}

/// Fisher-Yates shuffle drawing `u64` indices.
pub fn shuffle<T, R: Rng>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i as u64) as usize;
        items.swap(i, j);
    }
}

pub(crate) mod domain {
    pub const SPLIT: u64 = 1;
    pub const SYNTH_SAMPLE: u64 = 2;
    pub const SYNTH_PATIENT: u64 = 3;
    pub const SYNTH_LABEL: u64 = 4;
    pub const DEEP_INIT: u64 = 6;
    pub const DEEP_ORDER: u64 = 7;
}
