//! Seeded random streams.
//!
//! Every consumer of randomness draws from a named sub-stream of one master
//! seed, so changing how many numbers one component draws never perturbs
//! another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub const STREAM_SAMPLING: &str = "sampling";
pub const STREAM_INIT: &str = "init";
pub const STREAM_FOLDS: &str = "folds";
pub const STREAM_SYNTH: &str = "synth";
pub const STREAM_PROBE: &str = "probe";

/// Derives an independent generator for `name` from `seed`.
pub fn substream(seed: u64, name: &str) -> Rng {
    // FNV-1a over the name, then mixed with the seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(h)))
}

/// Generator for item `index` of a stream, e.g. one per track.
pub fn indexed(seed: u64, name: &str, index: u64) -> Rng {
    let base = format!("{name}#{index}");
    substream(seed, &base)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
