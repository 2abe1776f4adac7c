//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by a run seed plus a fixed tuple of coordinates, so streams
//! never depend on how many values another stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 0;
pub const STREAM_TEXT: u64 = 1;
pub const STREAM_IMAGE: u64 = 2;
pub const STREAM_BATCH: u64 = 3;
pub const STREAM_SYNTH: u64 = 4;
pub const STREAM_PROBE: u64 = 5;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, coords: &[u64]) -> u64 {
    coords.iter().fold(splitmix(seed), |h, &c| splitmix(h ^ splitmix(c)))
}

pub fn derive_rng(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, coords))
}
