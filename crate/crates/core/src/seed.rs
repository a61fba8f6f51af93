//! Seed derivation.
//!
//! Every random stream in a run is seeded from the master seed, a component
//! name and an index: the first eight bytes (little endian) of
//! `SHA-256(master_le || component || index_le)`. Streams for different
//! components or repeats are therefore independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type RunRng = ChaCha8Rng;

pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(component.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn rng_for(master: u64, component: &str, index: u64) -> RunRng {
    RunRng::seed_from_u64(derive_seed(master, component, index))
}
