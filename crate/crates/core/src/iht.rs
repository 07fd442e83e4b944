//! Iterative hard thresholding.
//!
//! Starting from `x = 0`, repeat `x <- H_L(x + A^H (y - A x))` until the
//! squared change between iterates drops below the stopping threshold or
//! the iteration cap is hit. The step size is fixed at one, which is
//! stable because measurement matrices are normalized to `||A||_op < 1`.

use num_complex::Complex64;

use crate::error::{check_len, Error, Result};
use crate::linmap::MeasurementMatrix;
use crate::numcore::{call_finite, cnorm_sq};
use crate::sparsify::{apply_mask, top_l_support, SparseApprox, Support};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IhtConfig {
    pub sparsity: usize,
    /// Threshold on `||x_{i+1} - x_i||^2`.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Multiply `epsilon` by `max(1, ||y||^2)` before use.
    pub scale_epsilon: bool,
}

impl IhtConfig {
    pub fn new(sparsity: usize) -> Self {
        Self {
            sparsity,
            epsilon: 1e-8,
            max_iters: 500,
            scale_epsilon: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sparsity == 0 {
            return Err(Error::invalid("sparsity", "must be at least 1"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("iht_epsilon", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("iht_max_iters", "must be at least 1"));
        }
        Ok(())
    }

    fn threshold(&self, y: &[Complex64]) -> f64 {
        if self.scale_epsilon {
            self.epsilon * cnorm_sq(y).max(1.0)
        } else {
            self.epsilon
        }
    }
}

#[derive(Debug, Clone)]
pub struct IhtResult {
    pub estimate: SparseApprox,
    pub iterations: usize,
    pub converged: bool,
    /// `||y - A x||^2` at the returned estimate.
    pub final_residual: f64,
    /// `||y - A x_i||^2` for `x_0 = 0, x_1, ...`, ending at the returned iterate.
    pub residuals: Vec<f64>,
}

/// Keeps the `l` largest-modulus entries (ties to the lower index).
pub fn hard_threshold(x: &[Complex64], l: usize) -> Result<SparseApprox> {
    let support = top_l_support(x, l)?;
    apply_mask(x, &support)
}

fn residual(a: &MeasurementMatrix, y: &[Complex64], x: &SparseApprox) -> Result<Vec<Complex64>> {
    let ax = a.compress_on_support(&x.dense, x.support.indices())?;
    Ok(y.iter().zip(ax).map(|(yi, axi)| yi - axi).collect())
}

pub fn iht_reconstruct(a: &MeasurementMatrix, y: &[Complex64], cfg: &IhtConfig) -> Result<IhtResult> {
    cfg.validate()?;
    check_len("iht_reconstruct", a.rows(), y.len())?;
    let n = a.cols();
    if cfg.sparsity > n {
        return Err(Error::SparsityTooLarge {
            sparsity: cfg.sparsity,
            dim: n,
        });
    }
    let eps = cfg.threshold(y);
    let mut x = SparseApprox {
        dense: vec![Complex64::new(0.0, 0.0); n],
        support: Support::empty(n),
    };
    let mut r = y.to_vec();
    let mut residuals = vec![cnorm_sq(&r)];
    let mut step = vec![Complex64::new(0.0, 0.0); n];

    for iteration in 1..=cfg.max_iters {
        step.copy_from_slice(&x.dense);
        a.adjoint_accumulate(&r, &mut step)?;
        let next = hard_threshold(&step, cfg.sparsity)?;
        if !call_finite(&next.dense) {
            return Err(Error::Diverged { iteration });
        }
        let change: f64 = next
            .dense
            .iter()
            .zip(&x.dense)
            .map(|(p, q)| (p - q).norm_sqr())
            .sum();
        x = next;
        r = residual(a, y, &x)?;
        residuals.push(cnorm_sq(&r));
        if change < eps {
            return Ok(IhtResult {
                final_residual: *residuals.last().unwrap(),
                estimate: x,
                iterations: iteration,
                converged: true,
                residuals,
            });
        }
    }
    Ok(IhtResult {
        final_residual: *residuals.last().unwrap(),
        estimate: x,
        iterations: cfg.max_iters,
        converged: false,
        residuals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmap::{generate_matrix, RealMatrix};
    use crate::numcore::rng_stream;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn scaled_identity(n: usize) -> MeasurementMatrix {
        let mut m = RealMatrix::identity(n);
        m.scale(1.0 / 1.01);
        MeasurementMatrix::from_matrix(m, 1.0 / 1.01, "identity").unwrap()
    }

    #[test]
    fn hard_threshold_examples() {
        let x = vec![c(5.0, 0.0), c(-3.0, 0.0), c(1.0, 0.0), c(0.0, 4.0)];
        assert_eq!(
            hard_threshold(&x, 2).unwrap().dense,
            vec![c(5.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.0, 4.0)]
        );
        assert_eq!(hard_threshold(&x, 4).unwrap().dense, x);
        let flat = vec![c(2.0, 0.0); 3];
        assert_eq!(
            hard_threshold(&flat, 1).unwrap().dense,
            vec![c(2.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)]
        );
        assert!(hard_threshold(&flat, 4).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(IhtConfig::new(0).validate().is_err());
        assert!(IhtConfig { epsilon: 0.0, ..IhtConfig::new(1) }.validate().is_err());
        assert!(IhtConfig { max_iters: 0, ..IhtConfig::new(1) }.validate().is_err());
        assert!(IhtConfig::new(3).validate().is_ok());
    }

    #[test]
    fn zero_measurement_converges_immediately() {
        let a = generate_matrix(&mut rng_stream(1, "matrix"), 4, 8, 1.01).unwrap();
        let res = iht_reconstruct(&a, &[c(0.0, 0.0); 4], &IhtConfig::new(2)).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert!(res.estimate.dense.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn scaled_identity_recovers_exactly() {
        let a = scaled_identity(10);
        let mut s = vec![c(0.0, 0.0); 10];
        s[3] = c(1.5, -0.5);
        s[7] = c(-2.0, 1.0);
        let y = a.compress(&s).unwrap();
        let cfg = IhtConfig {
            epsilon: 1e-28,
            max_iters: 10_000,
            scale_epsilon: false,
            ..IhtConfig::new(2)
        };
        let res = iht_reconstruct(&a, &y, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.estimate.support.indices(), &[3, 7]);
        let err: f64 = res.estimate.dense.iter().zip(&s).map(|(p, q)| (p - q).norm_sqr()).sum();
        assert!(err / cnorm_sq(&s) < 1e-10);
    }

    #[test]
    fn residual_is_monotone_and_output_sparse() {
        let a = generate_matrix(&mut rng_stream(3, "matrix"), 30, 80, 1.01).unwrap();
        let mut g = rng_stream(3, "y");
        let y: Vec<_> = (0..30).map(|_| g.complex_normal(1.0)).collect();
        let cfg = IhtConfig { max_iters: 300, ..IhtConfig::new(6) };
        let res = iht_reconstruct(&a, &y, &cfg).unwrap();
        assert!(res.estimate.support.len() <= 6);
        for w in res.residuals.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{} -> {}", w[0], w[1]);
        }
        assert_eq!(res.residuals.len(), res.iterations + 1);
    }

    #[test]
    fn converged_estimate_is_near_fixed_point() {
        let a = generate_matrix(&mut rng_stream(4, "matrix"), 20, 50, 1.01).unwrap();
        let mut g = rng_stream(4, "y");
        let y: Vec<_> = (0..20).map(|_| g.complex_normal(1.0)).collect();
        let cfg = IhtConfig { max_iters: 5000, ..IhtConfig::new(4) };
        let res = iht_reconstruct(&a, &y, &cfg).unwrap();
        assert!(res.converged);
        let mut step = res.estimate.dense.clone();
        let r = residual(&a, &y, &res.estimate).unwrap();
        a.adjoint_accumulate(&r, &mut step).unwrap();
        let again = hard_threshold(&step, 4).unwrap();
        let change: f64 = again
            .dense
            .iter()
            .zip(&res.estimate.dense)
            .map(|(p, q)| (p - q).norm_sqr())
            .sum();
        assert!(change.sqrt() <= cfg.threshold(&y).sqrt());
    }

    #[test]
    fn dimension_errors() {
        let a = generate_matrix(&mut rng_stream(1, "matrix"), 4, 8, 1.01).unwrap();
        assert!(iht_reconstruct(&a, &[c(0.0, 0.0); 3], &IhtConfig::new(1)).is_err());
        assert!(iht_reconstruct(&a, &[c(0.0, 0.0); 4], &IhtConfig::new(9)).is_err());
    }
}
