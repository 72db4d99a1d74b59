//! Seeded random streams.
//!
//! All randomness descends from explicit 64-bit seeds expanded into named
//! streams, so that e.g. the data-order stream is identical across runs that
//! differ only in loss choice. ChaCha keeps the streams portable across
//! platforms.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream used for parameter initialization.
pub const STREAM_INIT: &str = "init";
/// Stream used for epoch shuffles of the training data order.
pub const STREAM_DATA: &str = "data";
/// Stream used for sampling domains during batch assembly.
pub const STREAM_DOMAIN: &str = "domain-sampling";
/// Stream used for synthetic corpus generation.
pub const STREAM_CORPUS: &str = "corpus";

/// FNV-1a, used only to map stream names onto ChaCha stream ids.
fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic RNG for the given root seed and stream name. Distinct
/// names yield independent streams from the same root.
pub fn stream_rng(root_seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(fnv1a(name));
    rng
}
