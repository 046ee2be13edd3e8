//! Counter-based random streams.
//!
//! A stream is addressed by `(master_seed, stream_id, counter)`. The
//! generator is ChaCha20 keyed from the master seed, with the stream id
//! selecting the ChaCha nonce and the counter being the 32-bit word
//! position inside that stream. Normals use the ziggurat transform of
//! `rand_distr::StandardNormal`; uniforms use the 53-bit mantissa method of
//! `rand`. Both transforms are fixed by the lockfile, so checkpointed runs
//! replay exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::error::Error;

#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha20Rng,
}

/// SplitMix64 finalizer, used to derive child stream ids.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self { master_seed, stream_id, rng }
    }

    /// Reopens a stream at a recorded counter position.
    pub fn at(master_seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut s = Self::new(master_seed, stream_id);
        s.rng.set_word_pos(counter as u128);
        s
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// An independent stream under the same master seed, keyed by `(self, tag)`.
    pub fn derive(&self, tag: u64) -> RngStream {
        RngStream::new(self.master_seed, mix(self.stream_id ^ mix(tag)))
    }

    pub fn next_f64(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random::<u64>()
    }

    pub fn standard_normal_f64(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// I.i.d. N(0, 1) draws in the given shape.
    pub fn standard_normal(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.standard_normal_f64()).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches shape")
    }

    /// A draw from `[a, b)`.
    pub fn uniform(&mut self, a: f64, b: f64) -> Result<f64, Error> {
        if !(a < b) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidArgument(format!("uniform: need a < b, got [{a}, {b})")));
        }
        let x = a + (b - a) * self.next_f64();
        // rounding can land exactly on b for wide ranges
        Ok(if x < b { x } else { a })
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.index(i + 1);
            p.swap(i, j);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_reproduces_sequence() {
        let mut a = RngStream::new(42, 7);
        let first = a.standard_normal(&[100]);
        let mut b = RngStream::new(42, 7);
        assert_eq!(first, b.standard_normal(&[100]));
    }

    #[test]
    fn replay_from_counter() {
        let mut a = RngStream::new(3, 1);
        let _ = a.standard_normal(&[17]);
        let pos = a.counter();
        let tail = a.standard_normal(&[50]);
        let mut b = RngStream::at(3, 1, pos);
        assert_eq!(tail, b.standard_normal(&[50]));
    }

    #[test]
    fn normal_moments() {
        let mut s = RngStream::new(1, 0);
        let n = 1_000_000;
        let x = s.standard_normal(&[n]);
        let mean = x.sum() / n as f64;
        let var = x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let a = RngStream::new(9, 0).standard_normal(&[n]);
        let b = RngStream::new(9, 1).standard_normal(&[n]);
        let (ma, mb) = (a.sum() / n as f64, b.sum() / n as f64);
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.data().iter().zip(b.data()) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma) * (x - ma);
            sbb += (y - mb) * (y - mb);
        }
        let r = sab / (saa * sbb).sqrt();
        assert!(r.abs() < 0.01, "{r}");
    }

    #[test]
    fn uniform_range_mean_and_replay() {
        let mut s = RngStream::new(5, 2);
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| s.uniform(-1.0, 1.0).unwrap()).collect();
        assert!(draws.iter().all(|&x| (-1.0..1.0).contains(&x)));
        let mean = draws.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        let mut r = RngStream::new(5, 2);
        let again: Vec<f64> = (0..n).map(|_| r.uniform(-1.0, 1.0).unwrap()).collect();
        assert_eq!(draws, again);
    }

    #[test]
    fn uniform_rejects_empty_interval() {
        let mut s = RngStream::new(0, 0);
        assert!(s.uniform(1.0, 1.0).is_err());
        assert!(s.uniform(2.0, 1.0).is_err());
    }

    #[test]
    fn derived_streams_differ() {
        let s = RngStream::new(11, 4);
        let a = s.derive(0).standard_normal(&[4]);
        let b = s.derive(1).standard_normal(&[4]);
        assert_ne!(a, b);
        assert_eq!(a, s.derive(0).standard_normal(&[4]));
    }
}
