//! Named seed derivation. Every random stream is a pure function of the master
//! seed, a purpose label and a tuple of indices; there is no global rng state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type RandomSource = ChaCha8Rng;

pub fn derive_seed(master: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((purpose.len() as u64).to_le_bytes());
    h.update(purpose.as_bytes());
    for i in indices {
        h.update(i.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

pub fn stream(master: u64, purpose: &str, indices: &[u64]) -> RandomSource {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, indices))
}
