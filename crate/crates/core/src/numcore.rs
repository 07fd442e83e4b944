//! Numeric primitives shared by the rest of the crate: labeled random
//! streams, the real-to-baseband packing, and small vector helpers.
//!
//! A real update of length `d` is carried as `N = ceil(d/2)` complex
//! symbols. The first `N` reals become the real parts and the remaining
//! `d - N` reals the imaginary parts; for odd `d` the last imaginary slot
//! is a zero pad that the receiver drops.

use num_complex::Complex64;
use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{check_len, Error, Result};

pub type RealVector = Vec<f64>;
pub type BasebandVector = Vec<Complex64>;

/// Number of complex symbols needed to carry `d` reals.
pub fn baseband_len(d: usize) -> usize {
    d.div_ceil(2)
}

pub fn to_baseband(v: &[f64]) -> Result<BasebandVector> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = baseband_len(v.len());
    Ok((0..n)
        .map(|j| Complex64::new(v[j], v.get(j + n).copied().unwrap_or(0.0)))
        .collect())
}

pub fn from_baseband(s: &[Complex64], d: usize) -> Result<RealVector> {
    if d == 0 {
        return Err(Error::EmptyInput);
    }
    let n = baseband_len(d);
    check_len("from_baseband", n, s.len())?;
    let mut out = Vec::with_capacity(d);
    out.extend(s.iter().map(|c| c.re));
    out.extend(s.iter().take(d - n).map(|c| c.im));
    Ok(out)
}

/// Deterministic random stream keyed by a master seed and a text label.
///
/// Streams with the same `(master_seed, label)` replay the same draws;
/// different labels give independent ChaCha keys.
#[derive(Debug, Clone)]
pub struct RngStream {
    master_seed: u64,
    label: String,
    counter: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(master_seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(master_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        Self {
            master_seed,
            label,
            counter: 0,
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Number of 32/64-bit words drawn so far.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Uniform real in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.sample(StandardNormal)
    }

    /// Circularly symmetric complex Gaussian `CN(0, variance)`: real and
    /// imaginary parts each `N(0, variance / 2)`.
    pub fn complex_normal(&mut self, variance: f64) -> Complex64 {
        let sd = (variance / 2.0).sqrt();
        let re = self.standard_normal();
        let im = self.standard_normal();
        Complex64::new(sd * re, sd * im)
    }

    /// `k` distinct indices from `0..n`, uniform without replacement,
    /// returned sorted.
    pub fn subset(&mut self, n: usize, k: usize) -> Result<Vec<usize>> {
        if k > n {
            return Err(Error::SparsityTooLarge { sparsity: k, dim: n });
        }
        let mut picked = index::sample(self, n, k).into_vec();
        picked.sort_unstable();
        Ok(picked)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.counter += 1;
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.counter += dst.len().div_ceil(8) as u64;
        self.rng.fill_bytes(dst)
    }
}

pub fn rng_stream(master_seed: u64, label: impl Into<String>) -> RngStream {
    RngStream::new(master_seed, label)
}

pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn cnorm_sq(v: &[Complex64]) -> f64 {
    v.iter().map(|c| c.norm_sqr()).sum()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn call_finite(v: &[Complex64]) -> bool {
    v.iter().all(|c| c.re.is_finite() && c.im.is_finite())
}

/// Real inner product of complex vectors viewed as reals of twice the length.
pub fn real_inner(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}
