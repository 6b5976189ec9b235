//! Seed derivation and reproducible RNG streams.
//!
//! Every random choice in the workspace draws from a [`ChaCha12Rng`] whose
//! seed is derived from the run seed plus a string tag, so independent
//! subsystems (episodes, batches, noise draws) consume disjoint streams and
//! reordering work across threads cannot change any result.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derive a 32-byte seed from a master seed and a stream tag.
pub fn derive_seed(master: u64, tag: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(tag.as_bytes());
    h.finalize().into()
}

/// A seeded RNG for the stream identified by `tag`.
pub fn stream_rng(master: u64, tag: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(derive_seed(master, tag))
}

/// Serializable RNG position, used by kill-resume checkpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha12Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}
