//! Per-stage seed derivation.
//!
//! A run has one global seed. Every randomized stage gets
//! `derive_seed(global, stage, index)`: the stage name is hashed with 64-bit
//! FNV-1a, combined with the global seed and the record index, and the result
//! is passed through the SplitMix64 finalizer. The mapping is fixed and part of
//! the on-disk determinism contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(global: u64, stage: &str, index: u64) -> u64 {
    let s = splitmix64(global ^ fnv1a(stage.as_bytes()));
    splitmix64(s ^ splitmix64(index))
}

/// The RNG used by every randomized stage.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
