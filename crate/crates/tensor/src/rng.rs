use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;

/// Counter-based random stream.
///
/// A `(seed, stream)` pair fully determines the sequence of draws, so
/// independent consumers (MC samples, dropout layers, phantoms) can each own
/// a disjoint stream derived by label or index.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState { seed, stream, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh stream keyed by a name, independent of how many draws `self` made.
    pub fn derive(&self, label: &str) -> Self {
        Self::with_stream(self.seed, splitmix64(self.stream ^ fnv1a(label)))
    }

    /// Fresh stream keyed by an index.
    pub fn split(&self, index: u64) -> Self {
        Self::with_stream(
            self.seed,
            splitmix64(self.stream.wrapping_add(splitmix64(index ^ 0x5851_f42d))),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T]) {
        for v in out {
            *v = T::lit(self.normal());
        }
    }

    pub fn fill_uniform<T: Scalar>(&mut self, out: &mut [T], lo: f64, hi: f64) {
        for v in out {
            *v = T::lit(self.uniform_in(lo, hi));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_and_stream_repeat() {
        let mut a = RngState::with_stream(7, 3);
        let mut b = RngState::with_stream(7, 3);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_ignore_parent_consumption() {
        let root = RngState::new(11);
        let mut used = root.clone();
        used.normal();
        let mut a = root.derive("dropout");
        let mut b = used.derive("dropout");
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = root.derive("phantom");
        assert_ne!(root.derive("dropout").next_u64(), c.next_u64());
    }

    #[test]
    fn split_streams_differ() {
        let root = RngState::new(1);
        let firsts: Vec<u64> = (0..16).map(|i| root.split(i).next_u64()).collect();
        let mut sorted = firsts.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), firsts.len());
    }
}
