//! Seeded RNG streams.
//!
//! Every random choice in the pipeline flows from one root seed through a
//! named stream, so a whole experiment replays from a single `--seed`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a, fixed here so stream ids never depend on the platform hasher.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// RNG for the stream `domain` (e.g. "split", "init", "shuffle") derived
/// from a root seed. `index` separates per-item streams within a domain.
pub fn stream(seed: u64, domain: &str, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(domain.as_bytes()) ^ index);
    rng
}

/// A derived seed for a named sub-experiment (e.g. one model of a pipeline).
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    fnv1a(name.as_bytes()) ^ seed
}
