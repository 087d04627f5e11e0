//! Seeded, addressable randomness.
//!
//! An [`Rng`] is a `(seed, counter)` pair. Each draw opens a ChaCha8 stream
//! selected by the counter, so a draw is fully determined by the seed and the
//! call index. [`Rng::fork`] derives an independent child keyed by an integer
//! tag, which is how routing noise and dropout masks get addressed by
//! `(step, layer, expert)` regardless of evaluation order.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

/// SplitMix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8-stream-per-call";

    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child generator addressed by `tag`; does not advance `self`.
    pub fn fork(&self, tag: u64) -> Rng {
        Rng { seed: mix(self.seed ^ mix(tag.wrapping_add(0x5151_7A7A))), counter: 0 }
    }

    /// Opens the stream for the next call index.
    pub fn next_stream(&mut self) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(self.counter);
        self.counter += 1;
        r
    }

    /// I.i.d. standard normal entries.
    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let mut s = self.next_stream();
        Tensor::from_fn(shape, |_| s.sample(StandardNormal))
    }

    /// I.i.d. uniform entries in `[0, 1)`.
    pub fn uniform(&mut self, shape: &[usize]) -> Tensor {
        let mut s = self.next_stream();
        Tensor::from_fn(shape, |_| s.random::<f64>())
    }

    /// Standard normal truncated to `[-bound, bound]` by resampling.
    pub fn truncated_gaussian(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let mut s = self.next_stream();
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = s.sample(StandardNormal);
            if v.abs() <= bound {
                break v;
            }
        })
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.next_stream().random_range(0..n)
    }

    /// Deterministic permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(&mut self.next_stream());
        v
    }
}

/// Free-function form: standard normal noise of the given shape.
pub fn gaussian_noise(rng: &mut Rng, shape: &[usize]) -> Tensor {
    rng.gaussian(shape)
}
