//! Keyed random streams.
//!
//! Every stream is a ChaCha8 keystream whose key is derived from a tuple of
//! integers, so a draw depends only on its key and position and never on
//! process state or call order elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream keyed by `(domain, a, b)`. `domain` separates unrelated uses of
/// the same seed values.
pub fn keyed(domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&domain.to_le_bytes());
    key[8..16].copy_from_slice(&a.to_le_bytes());
    key[16..24].copy_from_slice(&b.to_le_bytes());
    key[24..].copy_from_slice(b"dprune\0\0");
    ChaCha8Rng::from_seed(key)
}

pub(crate) mod domain {
    pub const EPOCH_ORDER: u64 = 1;
    pub const BLOBS: u64 = 2;
    pub const DISTILL_INIT: u64 = 3;
    pub const DISTILL_STEP: u64 = 4;
    pub const HUTCHINSON: u64 = 5;
    pub const LANDSCAPE: u64 = 6;
}
