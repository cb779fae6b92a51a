//! Seed derivation.
//!
//! One master seed feeds every random stream in a run. Each component
//! (data, init, dropout, shuffle, ...) gets its own stream derived by
//! mixing the master seed with a stable component tag through splitmix64:
//!
//! ```text
//! derived = splitmix64(splitmix64(master) ^ fnv1a(tag))
//! ```
//!
//! Streams are independent of the order in which components are created,
//! so two configurations that differ only in routing mode still see the
//! same data and the same adapter initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive(master: u64, tag: &str) -> u64 {
    splitmix64(splitmix64(master) ^ fnv1a(tag))
}

pub fn rng_for(master: u64, tag: &str) -> Rng {
    Rng::seed_from_u64(derive(master, tag))
}
