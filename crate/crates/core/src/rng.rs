//! Named random streams.
//!
//! Every consumer of randomness asks for its own stream derived from the run
//! seed and a purpose label, so that adding draws in one stage never shifts
//! the sequence seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const SPLIT: &str = "split";
pub const INIT: &str = "init";
pub const BATCHES: &str = "batches";
pub const NEGATIVES: &str = "negatives";
pub const FORGET_BATCHES: &str = "forget-batches";
pub const FORGET_NEGATIVES: &str = "forget-negatives";
pub const PROBE: &str = "probe";
pub const SYNTH: &str = "synth";

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for `purpose` under the run `seed`.
pub fn stream(seed: u64, purpose: &str) -> StreamRng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ fnv1a(purpose.as_bytes())))
}
