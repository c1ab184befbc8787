//! Deterministic random streams.
//!
//! Every random draw in the library comes from ChaCha8 keyed by a 64-bit seed
//! and a 64-bit stream id. The stream id packs a [`StreamKind`] into its top
//! 16 bits and a caller-chosen index (sample number, iteration, ...) into the
//! low 48 bits, so independent consumers never share a keystream and results do
//! not depend on the order in which streams are created.

use rand_chacha::rand_core::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named substream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Init = 1,
    Dropout = 2,
    Augment = 3,
    Sampling = 4,
    Phantom = 5,
    Split = 6,
    Test = 15,
}

const INDEX_BITS: u32 = 48;

#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

impl Rng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            inner,
            seed,
            stream,
        }
    }

    /// Stream `index` of family `kind` under `seed`.
    pub fn substream(seed: u64, kind: StreamKind, index: u64) -> Self {
        let index = index & ((1u64 << INDEX_BITS) - 1);
        Self::new(seed, ((kind as u64) << INDEX_BITS) | index)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in `0..n` (multiply-shift; bias is below 2^-64 * n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller; one draw per pair of uniforms.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = Rng::substream(7, StreamKind::Augment, 3);
        let mut b = Rng::substream(7, StreamKind::Augment, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn streams_differ() {
        let mut a = Rng::substream(7, StreamKind::Augment, 3);
        let mut b = Rng::substream(7, StreamKind::Augment, 4);
        let mut c = Rng::substream(7, StreamKind::Dropout, 3);
        let x = a.next_u64();
        assert_ne!(x, b.next_u64());
        assert_ne!(x, c.next_u64());
    }

    #[test]
    fn known_first_draw() {
        // Pins the generator so a dependency bump that changes the keystream is caught.
        let mut r = Rng::new(1, 5);
        assert_eq!(r.next_u64(), 7176808644310061755);
    }

    #[test]
    fn uniform_and_below_ranges() {
        let mut r = Rng::new(0, 0);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(7) < 7);
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::new(11, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }
}
