//! Deterministic random streams.
//!
//! All stochastic code takes an explicit stream. Fan-out (per particle, per
//! outer sample, per seed replica) derives child streams from sequentially
//! drawn child seeds, so results never depend on worker count or scheduling.

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// The random stream used throughout the crate.
pub type RngStream = ChaCha8Rng;

/// Root stream for a seed.
pub fn stream(seed: u64) -> RngStream {
    RngStream::seed_from_u64(seed)
}

/// Child stream derived by drawing one seed from the parent.
pub fn child(parent: &mut impl RngCore) -> RngStream {
    RngStream::seed_from_u64(parent.next_u64())
}

/// A batch of independent child seeds, drawn sequentially from the parent.
pub fn child_seeds(parent: &mut impl RngCore, n: usize) -> Vec<u64> {
    (0..n).map(|_| parent.next_u64()).collect()
}
