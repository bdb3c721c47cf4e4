//! Named, seed-derived random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from the root
//! seed, a stream name and a list of indices, so no global RNG state exists
//! and adding a consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a root seed, a stream name and indices into a 64-bit key.
pub fn derive_key(seed: u64, name: &str, indices: &[u64]) -> u64 {
    let mut k = splitmix(seed);
    for b in name.bytes() {
        k = splitmix(k ^ u64::from(b));
    }
    for &i in indices {
        k = splitmix(k ^ i.wrapping_mul(0x2545_f491_4f6c_dd1d));
    }
    k
}

pub fn stream(seed: u64, name: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, name, indices))
}
