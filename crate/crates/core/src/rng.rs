//! Deterministic random streams.
//!
//! Every source of randomness in a run is a [`RngStream`] derived from the
//! master seed, the worker rank and a [`Purpose`] tag. Streams never share
//! state, so consuming one (say, dropout) leaves every other stream intact.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. The discriminant is mixed into the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Data = 2,
    Dropout = 3,
    Peer = 4,
    Schedule = 5,
    /// Synthetic dataset generation.
    Synthetic = 16,
    /// Validation holdout sampling.
    Split = 17,
    /// Assignment of training rows to workers.
    Partition = 18,
}

/// 64-bit avalanche mix (splitmix64 finalizer).
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derivation key for `(master_seed, rank, purpose)`.
pub fn derive_key(master_seed: u64, rank: u64, purpose: Purpose) -> u64 {
    mix64(mix64(mix64(master_seed) ^ rank) ^ (purpose as u64).wrapping_mul(0xA24B_AED4_963E_E407))
}

/// A single-owner deterministic pseudo-random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn from_seed(seed: u64) -> Self {
        RngStream {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn derive(master_seed: u64, rank: usize, purpose: Purpose) -> Self {
        Self::from_seed(derive_key(master_seed, rank as u64, purpose))
    }

    /// Uniform `f64` in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Bernoulli draw with success probability `p`.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        // p == 1 must be exactly "always"; uniform() < 1 holds for every draw.
        self.uniform() < p
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(rand_distr::StandardNormal)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.inner);
    }

    /// `amount` distinct indices from `0..n`, sampled without replacement.
    pub fn sample_indices(&mut self, n: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, amount).into_vec()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

/// The per-worker streams of one run.
#[derive(Debug, Clone)]
pub struct WorkerStreams {
    pub init: RngStream,
    pub data: RngStream,
    pub dropout: RngStream,
    pub peer: RngStream,
    pub schedule: RngStream,
}

impl WorkerStreams {
    pub fn derive(master_seed: u64, rank: usize) -> Self {
        WorkerStreams {
            init: RngStream::derive(master_seed, rank, Purpose::Init),
            data: RngStream::derive(master_seed, rank, Purpose::Data),
            dropout: RngStream::derive(master_seed, rank, Purpose::Dropout),
            peer: RngStream::derive(master_seed, rank, Purpose::Peer),
            schedule: RngStream::derive(master_seed, rank, Purpose::Schedule),
        }
    }
}

/// One set of streams per worker rank.
pub fn derive_rng_streams(master_seed: u64, workers: usize) -> Vec<WorkerStreams> {
    (0..workers)
        .map(|rank| WorkerStreams::derive(master_seed, rank))
        .collect()
}
