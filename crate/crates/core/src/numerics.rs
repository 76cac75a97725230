//! Dense vector kernels, seeded stream randomness and the standard normal
//! CDF/PDF.
//!
//! Every reduction runs sequentially left to right so that results are
//! bit-reproducible regardless of how callers schedule work.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Standard normal CDF, `0.5 * erfc(-z / sqrt 2)`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Logistic sigmoid, evaluated without overflow for large |z|.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_dims(op: &'static str, left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::DimMismatch { op, left, right })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims("dot", a.len(), b.len())?;
    Ok(a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y))
}

/// `y <- alpha * x + y`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) -> Result<()> {
    check_dims("axpy", x.len(), y.len())?;
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
    Ok(())
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput { op: "mean" });
    }
    Ok(xs.iter().fold(0.0, |acc, x| acc + x) / xs.len() as f64)
}

pub fn norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc + x * x).sqrt()
}

/// Elementwise mean of equally sized vectors, accumulated in slice order.
pub fn mean_of(vectors: &[&[f64]]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::EmptyInput { op: "mean_of" })?;
    let mut acc = vec![0.0; first.len()];
    for v in vectors {
        axpy(1.0, v, &mut acc)?;
    }
    let m = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= m);
    Ok(acc)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_dims("Mat64::new", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dims("matvec", self.cols, v.len())?;
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }
}

/// Deterministic random stream identified by `(master_seed, stream_id)`.
///
/// Two instances with the same pair yield identical sequences; distinct
/// stream ids select disjoint ChaCha8 streams under the same key.
#[derive(Debug, Clone)]
pub struct Rng {
    master_seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

/// Named stream families. Combine with [`stream_key`] for finer keys.
pub mod streams {
    pub const SYNTH: u64 = 0x5359_4e54;
    pub const SPLIT: u64 = 0x5350_4c54;
    pub const PARTITION: u64 = 0x5041_5254;
    pub const INIT: u64 = 0x494e_4954;
    pub const PARTICIPATION: u64 = 0x5041_5254_4943;
    pub const CLIENT_ROUND: u64 = 0x434c_524e;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a sequence of integers into one stream id.
pub fn stream_key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6a09_e667_f3bc_c908, |h, &p| splitmix64(h ^ splitmix64(p)))
}

impl Rng {
    pub fn derive(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            inner,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream under the same master seed, keyed by this stream's id
    /// and `sub`. Does not advance `self`.
    pub fn substream(&self, sub: u64) -> Self {
        Self::derive(self.master_seed, stream_key(&[self.stream_id, sub]))
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Beta(a, b) draw; both parameters must be positive and finite.
    pub fn beta(&mut self, a: f64, b: f64) -> Result<f64> {
        let dist = Beta::new(a, b).map_err(|e| Error::invalid("beta parameters", e.to_string()))?;
        Ok(dist.sample(&mut self.inner))
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.inner.next_u64() % (i as u64 + 1)) as usize;
            items.swap(i, j);
        }
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
