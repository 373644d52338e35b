//! Named, order-independent random sub-streams derived from one seed.
//!
//! Every consumer of randomness asks for a stream by `(seed, tag, indices)`.
//! Streams never depend on how many numbers another stream has consumed, so
//! generation order and parallelism cannot change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn hash_tag(tag: &str) -> u64 {
    // FNV-1a
    tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Sub-stream keyed by a seed, a tag naming its purpose and any indices.
pub fn stream(seed: u64, tag: &str, indices: &[u64]) -> StreamRng {
    let mut key = splitmix64(seed ^ hash_tag(tag));
    for &i in indices {
        key = splitmix64(key ^ splitmix64(i.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    let mut bytes = [0u8; 32];
    let mut k = key;
    for chunk in bytes.chunks_mut(8) {
        k = splitmix64(k);
        chunk.copy_from_slice(&k.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Child seed for handing to a component that takes a plain `u64`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    splitmix64(splitmix64(seed) ^ hash_tag(tag))
}
