//! Seed derivation. Every random decision in the crate flows from a single
//! master seed through [`derive`], so parallel and serial runs agree.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a master seed with a sequence of tags (role, step, speaker index, ...)
/// into an independent child seed.
pub fn derive(master: u64, tags: &[u64]) -> u64 {
    let mut state = master ^ 0x6a09_e667_f3bc_c908;
    let mut out = splitmix64(&mut state);
    for &t in tags {
        state ^= t;
        out ^= splitmix64(&mut state);
    }
    out
}

/// Expand a 64-bit seed into the 32-byte key of a ChaCha stream.
pub fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut state = seed;
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    bytes
}

/// Deterministic RNG for a derived seed.
pub fn rng_from(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::from_seed(seed_bytes(seed))
}
