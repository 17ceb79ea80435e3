//! Deterministic random streams.
//!
//! Every stochastic component draws from its own ChaCha8 stream keyed by
//! `(seed, purpose, index, sub)`. The key is the 256-bit ChaCha seed itself,
//! so distinct keys can never collide and results do not depend on the order
//! in which parallel work completes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// What a stream is used for. Part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    SceneTheta = 1,
    Data = 2,
    Mcmc = 3,
    Chain = 4,
    Sprsa = 5,
    Curve = 6,
    Possibility = 7,
    Simulation = 8,
}

/// Opens the stream for `(seed, purpose, index, sub)`.
pub fn stream(seed: u64, purpose: Purpose, index: u64, sub: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..32].copy_from_slice(&sub.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Derives a 64-bit seed for a nested component (e.g. the MCMC run of one
/// replication) from a parent stream key.
pub fn derive_seed(seed: u64, purpose: Purpose, index: u64, sub: u64) -> u64 {
    use rand::Rng;
    stream(seed, purpose, index, sub).random()
}
