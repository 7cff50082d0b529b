//! Deterministic random streams.
//!
//! Everything stochastic in the pipeline (init, shuffling, augmentation,
//! data generation) draws from a stream derived from one root seed plus a
//! tag path, e.g. `(AUGMENT, epoch, sample_index)`. Streams with different
//! tag paths are statistically independent, and a stream's draw sequence
//! depends only on `(root, tags)`, never on scheduling or thread count.
//!
//! The value-level primitives (`unit`, `below`, `normal`) are implemented
//! here on top of raw `u64` output so the exact bit streams are owned by
//! this crate rather than by a dependency's sampling code.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tag for parameter-initialization streams.
pub const TAG_INIT: u64 = 1;
/// Tag for per-epoch shuffle streams.
pub const TAG_SHUFFLE: u64 = 2;
/// Tag for per-(epoch, sample) augmentation streams.
pub const TAG_AUGMENT: u64 = 3;
/// Tag for per-sample synthetic data generation streams.
pub const TAG_DATAGEN: u64 = 4;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer; a bijection on u64 used to absorb tags into a key.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root seed from which all substreams are derived.
#[derive(Debug, Clone, Copy)]
pub struct RngStream {
    root: u64,
}

impl RngStream {
    pub fn new(root: u64) -> Self {
        RngStream { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Derives the stream identified by a tag path. Each tag is absorbed in
    /// order, so `derive(&[a, b])` and `derive(&[b, a])` differ.
    pub fn derive(&self, tags: &[u64]) -> Rng {
        let mut state = mix(self.root ^ GOLDEN);
        for (i, &t) in tags.iter().enumerate() {
            state = mix(state ^ mix(t.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1))));
        }
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            chunk.copy_from_slice(&mix(state.wrapping_add(GOLDEN.wrapping_mul(i as u64 + 1))).to_le_bytes());
        }
        Rng {
            inner: ChaCha8Rng::from_seed(key),
        }
    }

    /// Stream feeding the augmentation of one sample in one epoch. The index
    /// is the sample's position in the dataset, not in the shuffled batch
    /// order, so the stream is independent of the permutation.
    pub fn sample_stream(&self, epoch: usize, sample_index: usize) -> Rng {
        self.derive(&[TAG_AUGMENT, epoch as u64, sample_index as u64])
    }

    pub fn shuffle_stream(&self, epoch: usize) -> Rng {
        self.derive(&[TAG_SHUFFLE, epoch as u64])
    }

    pub fn init_stream(&self) -> Rng {
        self.derive(&[TAG_INIT])
    }
}

/// One deterministic draw stream.
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn unit(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        (self.next_u64() >> 11) as f64 * SCALE
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in [0, n). Unbiased via multiply-shift rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = u128::from(self.next_u64()) * u128::from(n);
            if m as u64 >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Standard normal via Box-Muller; consumes exactly two u64 draws.
    pub fn normal(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        // u1 in (0, 1] so the log is finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = (self.next_u64() >> 11) as f64 * SCALE;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
