//! Dense tensors, seeded random streams and small statistics helpers.
//!
//! All randomness in the crate flows through [`SeededRng`], a SplitMix64
//! generator. SplitMix64 is a Weyl counter followed by a fixed 64-bit mixer,
//! so a given seed yields the same stream on every platform. Independent
//! sub-streams are obtained with [`derive_seed`] rather than by sharing a
//! generator between tasks.

use rand::{Rng, RngCore, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::SplitMix64;

use crate::error::{Error, Result};

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!("shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// One-dimensional tensor; panics on an empty vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "tensor must be non-empty");
        Self { shape: vec![data.len()], data }
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return Err(Error::invalid(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            )));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(Error::invalid(format!("index {index:?} out of bounds for {:?}", self.shape)));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Mixes a parent seed and a stream index into an independent child seed.
///
/// `derive_seed(p, i) = mix(p ^ mix(i + φ))` where `mix` is the SplitMix64
/// finalizer and `φ = 0x9E3779B97F4A7C15`.
pub fn derive_seed(parent: u64, stream: u64) -> u64 {
    mix64(parent ^ mix64(stream.wrapping_add(0x9E37_79B9_7F4A_7C15)))
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic SplitMix64 stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: SplitMix64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: SplitMix64::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fresh generator for sub-stream `stream`, independent of this one's position.
    pub fn child(&self, stream: u64) -> SeededRng {
        SeededRng::new(derive_seed(self.seed, stream))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 0 {
            1.0
        } else {
            -1.0
        }
    }
}

pub fn sample_rademacher(rng: &mut SeededRng, n: usize) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("rademacher sample size must be at least 1"));
    }
    Ok(Tensor::from_vec((0..n).map(|_| rng.rademacher()).collect()))
}

pub fn sample_gaussian(rng: &mut SeededRng, n: usize, sigma: f64) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::invalid("gaussian sample size must be at least 1"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    Ok(Tensor::from_vec((0..n).map(|_| sigma * rng.standard_normal()).collect()))
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(x: &[f64]) -> Result<(f64, f64)> {
    if x.is_empty() {
        return Err(Error::invalid("mean_std of an empty slice"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
