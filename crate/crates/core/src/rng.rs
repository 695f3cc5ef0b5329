//! Named, keyed random streams.
//!
//! Every stochastic draw comes from a ChaCha stream whose key is derived from
//! a master seed plus a path of integers (replicate, role, permutation index).
//! Streams never share state, so work can be split across threads in any
//! order without changing results.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream roles used by the simulation and permutation code.
pub mod role {
    pub const COVARIATES: u64 = 1;
    pub const NUISANCE: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const PERMUTATION: u64 = 5;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a 64-bit key from a seed and a path.
pub fn derive_key(seed: u64, path: &[u64]) -> u64 {
    let mut state = seed;
    let mut key = splitmix64(&mut state);
    for &p in path {
        state ^= p.wrapping_mul(0xD605_BBB5_8C8A_BB5D).wrapping_add(key);
        key = splitmix64(&mut state);
    }
    key
}

pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut state = derive_key(seed, path);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform random permutation of `0..n` for permutation replicate `b`.
pub fn permutation(seed: u64, b: u64, n: usize) -> Vec<usize> {
    let mut rng = stream(seed, &[role::PERMUTATION, b]);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}
