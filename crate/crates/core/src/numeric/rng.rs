//! Seeded random streams.
//!
//! The generator is ChaCha8 keyed by the 64-bit seed. ChaCha is a counter
//! based construction: the block counter and a 64-bit stream id select the
//! output, so `Rng::new(seed)` always yields the same bit stream and
//! `fork(id)` gives an independent, equally reproducible sub-stream.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numeric::Tensor;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent sub-stream `stream` of this seed, starting at counter 0.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.inner.random::<f64>() < p
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.uniform(lo, hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("numel matches shape")
    }

    pub fn normal_tensor(&mut self, shape: &[usize], std: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * self.normal()).collect();
        Tensor::new(shape.to_vec(), data).expect("numel matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(
            a.normal_tensor(&[3, 3], 1.0).data(),
            b.normal_tensor(&[3, 3], 1.0).data()
        );
    }

    #[test]
    fn forks_differ_from_parent_and_each_other() {
        let base = Rng::new(7);
        let mut f1 = base.fork(1);
        let mut f2 = base.fork(2);
        let mut f1_again = base.fork(1);
        let x1 = f1.next_u64();
        assert_ne!(x1, f2.next_u64());
        assert_eq!(x1, f1_again.next_u64());
        assert_ne!(x1, Rng::new(7).next_u64());
    }

    #[test]
    fn uniform_respects_bounds() {
        let mut r = Rng::new(0);
        for _ in 0..1000 {
            let v = r.uniform(-0.5, 0.25);
            assert!((-0.5..0.25).contains(&v));
        }
    }
}
