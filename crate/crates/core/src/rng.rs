//! Keyed random streams.
//!
//! Every stochastic quantity in the crate is drawn from a ChaCha stream whose
//! key and stream id are derived from a seed plus a structured label, so a
//! value depends only on *what* it is, never on evaluation order or thread
//! scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as StreamRng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over a label; stable across platforms and releases.
pub fn label_hash(label: &str) -> u64 {
    label.bytes().fold(FNV_OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// A stream keyed by `(seed, label, counters...)`.
pub fn stream(seed: u64, label: &str, counters: &[u64]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (w, chunk) in key.chunks_mut(8).enumerate() {
        let word = splitmix64(seed ^ splitmix64(w as u64 + 1));
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    let id = counters.iter().fold(label_hash(label), |h, &c| splitmix64(h ^ splitmix64(c)));
    rng.set_stream(id);
    rng
}
