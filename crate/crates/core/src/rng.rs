//! Named random substreams.
//!
//! Every random draw in the toolkit comes from a ChaCha stream keyed by the
//! master seed, a label, and a list of indices. Work items therefore see the
//! same numbers whether they run serially or on a thread pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives the stream for `(seed, label, indices)`.
pub fn substream(seed: u64, label: &str, indices: &[u64]) -> Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for i in indices {
        hasher.update(i.to_le_bytes());
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}
