//! Deterministic per-view random streams.
//!
//! A stream is a ChaCha20 keystream whose key is SHA-256 of
//! `("lowsplat-stream", seed, scene id, view id)`. Streams are independent of
//! the order in which they are created, so per-view work can run in any order
//! or in parallel.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const ALGORITHM: &str = "chacha20-sha256-key";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub scene_id: String,
    pub view_id: u64,
}

impl StreamId {
    pub fn new(scene_id: impl Into<String>, view_id: u64) -> Self {
        StreamId {
            scene_id: scene_id.into(),
            view_id,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: StreamId,
    inner: ChaCha20Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        let mut h = Sha256::new();
        h.update(b"lowsplat-stream");
        h.update(seed.to_le_bytes());
        h.update((stream.scene_id.len() as u64).to_le_bytes());
        h.update(stream.scene_id.as_bytes());
        h.update(stream.view_id.to_le_bytes());
        let key: [u8; 32] = h.finalize().into();
        SeededRng {
            seed,
            stream,
            inner: ChaCha20Rng::from_seed(key),
        }
    }

    pub fn for_view(seed: u64, scene_id: &str, view_id: u64) -> Self {
        SeededRng::new(seed, StreamId::new(scene_id, view_id))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &StreamId {
        &self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform01(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`; returns `lo` when the range is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let u = self.uniform01();
        lo + u * (hi - lo)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform01() < p
    }

    /// Standard normal via Box-Muller (consumes two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform01();
        let u2 = self.uniform01();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform01() * n as f64) as usize).min(n.saturating_sub(1))
    }
}
