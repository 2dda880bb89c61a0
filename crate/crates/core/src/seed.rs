//! Deterministic seed derivation.
//!
//! One master seed fans out into independent sub-streams by mixing in a
//! label. Every random stream in the crate is derived this way so that a run
//! is fully determined by its master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used throughout the simulator.
pub type SimRng = ChaCha8Rng;

/// Sub-stream labels.
pub mod label {
    pub const PROBLEM: u64 = 0x70_72_6f_62;
    pub const TOPOLOGY: u64 = 0x74_6f_70_6f;
    pub const INIT_X: u64 = 0x69_6e_69_74;
    pub const COMPRESS_X: u64 = 0x63_6d_70_78;
    pub const COMPRESS_Y: u64 = 0x63_6d_70_79;
    pub const CERTIFY: u64 = 0x63_65_72_74;
    pub const RUN: u64 = 0x72_75_6e_73;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `master`, order-sensitively.
pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_from(master: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, parts))
}
