//! Deterministic random streams.
//!
//! Every sampling routine takes an explicit `&mut impl Rng`. Streams used by
//! the harness are keyed by a master seed plus a path of integer keys
//! (replicate index, method, kept-draw index, ...) so results never depend on
//! execution order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

const fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a key path into a single 64-bit stream identifier.
pub fn stream_id(keys: &[u64]) -> u64 {
    keys.iter()
        .fold(0x5EED_0F_57AE_A4u64, |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Independent stream for `(seed, keys...)`.
pub fn stream(seed: u64, keys: &[u64]) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(keys));
    rng
}

/// Derives a child seed, for components that want a plain `u64` seed.
pub fn child_seed(seed: u64, keys: &[u64]) -> u64 {
    splitmix64(seed ^ stream_id(keys))
}
