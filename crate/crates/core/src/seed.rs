//! Named seed substreams.
//!
//! Every random decision in a run derives from one global seed. Each consumer
//! asks for its own substream by name (`"split"`, `"init"`, `"batching"`,
//! `"baseline"`, ...) so adding a consumer never perturbs the others.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic generator used throughout the crate.
pub type Rng = ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a byte string.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Seed of the substream `name` under `seed`.
pub fn substream(seed: u64, name: &str) -> u64 {
    mix(seed ^ mix(stable_hash(name.as_bytes())))
}

/// Seed of the `index`-th child of `seed`.
pub fn child(seed: u64, index: u64) -> u64 {
    mix(seed ^ mix(index.wrapping_add(0xA5A5_A5A5)))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn named_rng(seed: u64, name: &str) -> Rng {
    rng(substream(seed, name))
}
