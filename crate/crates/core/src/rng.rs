//! Seeded random streams.
//!
//! Every consumer derives its own ChaCha stream from the master seed plus a
//! path of stream ids, so draws for one series or batch never depend on how
//! many values another consumer took or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for `(seed, path)`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let id = path.iter().fold(0x5CCA_u64, |acc, &p| splitmix(acc ^ p));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Stream-id namespaces used across the crate.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SYNTHETIC: u64 = 2;
    pub const SCENARIO: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const AUGMENT: u64 = 5;
}
