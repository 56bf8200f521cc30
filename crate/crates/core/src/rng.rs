//! Seeded random streams.
//!
//! Every random draw in the crate goes through [`Rng`], a thin wrapper over
//! xoshiro256++ seeded through SplitMix64 (`seed_from_u64`). The conversions
//! on top of the raw 64-bit output are fixed here so that another
//! implementation can reproduce the same numbers:
//!
//! * stream seed: `splitmix64(seed ^ splitmix64(tag ^ splitmix64(index)))`
//! * `uniform()`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`
//! * `below(n)`: `(next_u64() as u128 * n) >> 64`
//! * `normal()`: Box-Muller cosine branch, `u1 = 1 - uniform()`,
//!   `u2 = uniform()`, `sqrt(-2 ln u1) * cos(2 pi u2)`; one normal per two
//!   uniforms, the sine branch is discarded.

use rand_core::{Rng as _, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

/// Independent stream identifiers. Changing a consumer of one stream never
/// shifts the numbers seen by another.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Generate = 1,
    Split = 2,
    Batch = 3,
    Init = 4,
    Adapter = 5,
}

#[derive(Debug, Clone)]
pub struct Rng {
    inner: Xoshiro256PlusPlus,
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
        }
    }

    pub fn stream(seed: u64, stream: Stream, index: u64) -> Self {
        let mixed = splitmix64(seed ^ splitmix64(stream as u64 ^ splitmix64(index)));
        Self::from_seed(mixed)
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates, walking from the back.
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
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4)
            .map({
                let mut r = Rng::stream(7, Stream::Batch, 0);
                move |_| r.next_u64()
            })
            .collect();
        let mut r = Rng::stream(7, Stream::Batch, 0);
        let b: Vec<u64> = (0..4).map(|_| r.next_u64()).collect();
        assert_eq!(a, b);
        let mut other = Rng::stream(7, Stream::Batch, 1);
        assert_ne!(a[0], other.next_u64());
        let mut other = Rng::stream(7, Stream::Init, 0);
        assert_ne!(a[0], other.next_u64());
    }

    #[test]
    fn uniform_and_below_ranges() {
        let mut r = Rng::from_seed(3);
        for _ in 0..10_000 {
            let u = r.uniform();
            assert!((0.0..1.0).contains(&u));
            assert!(r.below(5) < 5);
        }
    }

    #[test]
    fn normal_moments() {
        let mut r = Rng::from_seed(11);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|_| r.normal()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn shuffle_is_permutation() {
        let mut r = Rng::from_seed(5);
        let mut v: Vec<usize> = (0..100).collect();
        r.shuffle(&mut v);
        let mut sorted = v.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_ne!(v, sorted);
    }
}
