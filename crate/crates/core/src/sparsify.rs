//! Sparsification masks and the reduce/expand pair used when only the
//! preserved entries are sent over the air.

use std::cmp::Ordering;
use std::fmt;

use num_complex::Complex64;

use crate::error::{check_len, Error, Result};
use crate::numcore::{BasebandVector, RngStream};

/// Sorted, duplicate-free index set inside `0..ambient_dim`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    indices: Vec<usize>,
    ambient_dim: usize,
}

impl Support {
    /// Builds a support from arbitrary indices; sorts and rejects duplicates
    /// or out-of-range entries.
    pub fn new(mut indices: Vec<usize>, ambient_dim: usize) -> Result<Self> {
        indices.sort_unstable();
        if let Some(&last) = indices.last() {
            if last >= ambient_dim {
                return Err(Error::IndexOutOfRange {
                    index: last,
                    dim: ambient_dim,
                });
            }
        }
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("support", "duplicate index"));
        }
        Ok(Self {
            indices,
            ambient_dim,
        })
    }

    pub fn full(ambient_dim: usize) -> Self {
        Self {
            indices: (0..ambient_dim).collect(),
            ambient_dim,
        }
    }

    pub fn empty(ambient_dim: usize) -> Self {
        Self {
            indices: Vec::new(),
            ambient_dim,
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// Space-separated sorted index list, the form used in experiment logs.
impl fmt::Display for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, j) in self.indices.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{j}")?;
        }
        Ok(())
    }
}

/// Full-length vector that is zero outside `support`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseApprox {
    pub dense: BasebandVector,
    pub support: Support,
}

/// The preserved entries of a [`SparseApprox`], in increasing index order.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedVector {
    pub values: Vec<Complex64>,
    pub support: Support,
}

/// Orders by decreasing modulus, then increasing index.
fn by_modulus_desc(s: &[Complex64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        s[b].norm_sqr()
            .total_cmp(&s[a].norm_sqr())
            .then(a.cmp(&b))
    }
}

/// Indices of the `l` largest-modulus entries; ties go to the lower index.
pub fn top_l_support(s: &[Complex64], l: usize) -> Result<Support> {
    let n = s.len();
    if l > n {
        return Err(Error::SparsityTooLarge { sparsity: l, dim: n });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if l > 0 && l < n {
        idx.select_nth_unstable_by(l - 1, by_modulus_desc(s));
    }
    idx.truncate(l);
    idx.sort_unstable();
    Ok(Support {
        indices: idx,
        ambient_dim: n,
    })
}

/// `l` indices drawn uniformly without replacement from `0..n`.
///
/// Every party that replays the same stream obtains the same mask.
pub fn uniform_support(rng: &mut RngStream, n: usize, l: usize) -> Result<Support> {
    let indices = rng.subset(n, l)?;
    Ok(Support {
        indices,
        ambient_dim: n,
    })
}

pub fn apply_mask(s: &[Complex64], support: &Support) -> Result<SparseApprox> {
    check_len("apply_mask", support.ambient_dim, s.len())?;
    let mut dense = vec![Complex64::new(0.0, 0.0); s.len()];
    for &j in &support.indices {
        dense[j] = s[j];
    }
    Ok(SparseApprox {
        dense,
        support: support.clone(),
    })
}

pub fn reduce(sp: &SparseApprox) -> ReducedVector {
    ReducedVector {
        values: sp.support.indices.iter().map(|&j| sp.dense[j]).collect(),
        support: sp.support.clone(),
    }
}

/// Inserts the reduced values back at their support positions.
pub fn expand(r: &ReducedVector, n: usize) -> Result<BasebandVector> {
    check_len("expand", r.support.len(), r.values.len())?;
    if let Some(&last) = r.support.indices.last() {
        if last >= n {
            return Err(Error::IndexOutOfRange { index: last, dim: n });
        }
    }
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (&j, &v) in r.support.indices.iter().zip(&r.values) {
        out[j] = v;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng_stream;
    use proptest::prelude::*;

    fn re(v: &[f64]) -> Vec<Complex64> {
        v.iter().map(|&x| Complex64::new(x, 0.0)).collect()
    }

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn top_l_picks_largest_moduli() {
        let s = vec![c(3.0, 0.0), c(-1.0, 0.0), c(0.5, 0.0), c(0.0, 2.0)];
        assert_eq!(top_l_support(&s, 2).unwrap().indices(), &[0, 3]);
    }

    #[test]
    fn top_l_ties_go_to_lowest_index() {
        let s = vec![c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.0, -1.0)];
        assert_eq!(top_l_support(&s, 2).unwrap().indices(), &[0, 1]);
    }

    #[test]
    fn top_l_full_and_too_large() {
        let mut rng = rng_stream(1, "t");
        let s: Vec<_> = (0..9).map(|_| rng.complex_normal(1.0)).collect();
        assert_eq!(top_l_support(&s, 9).unwrap(), Support::full(9));
        assert!(matches!(
            top_l_support(&s, 10),
            Err(Error::SparsityTooLarge { .. })
        ));
        assert!(top_l_support(&s, 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_support_exhaustive_and_deterministic() {
        let mut rng = rng_stream(1, "mask");
        assert_eq!(uniform_support(&mut rng, 4, 4).unwrap(), Support::full(4));
        let a = uniform_support(&mut rng_stream(7, "mask/3"), 100, 10).unwrap();
        let b = uniform_support(&mut rng_stream(7, "mask/3"), 100, 10).unwrap();
        assert_eq!(a, b);
        assert!(uniform_support(&mut rng, 3, 4).is_err());
    }

    #[test]
    fn uniform_support_single_index_frequencies() {
        // Binomial(n, 0.1) per index: accept within 3 standard deviations.
        let draws = 100_000;
        let mut rng = rng_stream(11, "freq");
        let mut counts = [0usize; 10];
        for _ in 0..draws {
            counts[uniform_support(&mut rng, 10, 1).unwrap().indices()[0]] += 1;
        }
        let p = 0.1;
        let sd = (draws as f64 * p * (1.0 - p)).sqrt();
        for &k in &counts {
            assert!((k as f64 - draws as f64 * p).abs() < 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn masking() {
        let s = re(&[1.0, 2.0, 3.0, 4.0]);
        let sp = apply_mask(&s, &Support::new(vec![3, 1], 4).unwrap()).unwrap();
        assert_eq!(sp.dense, re(&[0.0, 2.0, 0.0, 4.0]));
        assert_eq!(apply_mask(&s, &Support::full(4)).unwrap().dense, s);
        assert_eq!(
            apply_mask(&s, &Support::empty(4)).unwrap().dense,
            re(&[0.0; 4])
        );
        assert!(apply_mask(&s, &Support::full(5)).is_err());
    }

    #[test]
    fn reduce_and_expand() {
        let sp = SparseApprox {
            dense: re(&[0.0, 2.0, 0.0, 4.0]),
            support: Support::new(vec![1, 3], 4).unwrap(),
        };
        let r = reduce(&sp);
        assert_eq!(r.values, re(&[2.0, 4.0]));
        assert_eq!(expand(&r, 4).unwrap(), sp.dense);

        let zero = SparseApprox {
            dense: re(&[0.0; 3]),
            support: Support::new(vec![0, 1], 3).unwrap(),
        };
        assert_eq!(reduce(&zero).values, re(&[0.0, 0.0]));

        let single = ReducedVector {
            values: re(&[5.0]),
            support: Support::new(vec![0], 1).unwrap(),
        };
        assert_eq!(expand(&single, 1).unwrap(), re(&[5.0]));
        assert!(matches!(
            expand(&r, 3),
            Err(Error::IndexOutOfRange { index: 3, dim: 3 })
        ));
    }

    #[test]
    fn support_validation_and_display() {
        assert!(Support::new(vec![1, 1], 3).is_err());
        assert!(Support::new(vec![3], 3).is_err());
        let s = Support::new(vec![4, 0, 2], 5).unwrap();
        assert_eq!(s.to_string(), "0 2 4");
        assert!(s.contains(2) && !s.contains(1));
    }

    fn brute_force_best_error(s: &[Complex64], l: usize) -> f64 {
        // Error of the best l-term approximation over every support.
        let n = s.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != l {
                continue;
            }
            let err: f64 = (0..n)
                .filter(|j| mask & (1 << j) == 0)
                .map(|j| s[j].norm_sqr())
                .sum();
            best = best.min(err);
        }
        best
    }

    proptest! {
        #[test]
        fn top_l_is_best_l_term_approximation(
            parts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..=10),
            l_frac in 0.0f64..=1.0,
        ) {
            let s: Vec<_> = parts.iter().map(|&(a, b)| c(a, b)).collect();
            let l = ((s.len() as f64) * l_frac).round() as usize;
            let sp = apply_mask(&s, &top_l_support(&s, l).unwrap()).unwrap();
            let err: f64 = sp.dense.iter().zip(&s).map(|(a, b)| (a - b).norm_sqr()).sum();
            prop_assert!(err <= brute_force_best_error(&s, l) + 1e-12);
        }

        #[test]
        fn reduce_expand_roundtrip(
            parts in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..40),
            seed in 0u64..1000,
        ) {
            let s: Vec<_> = parts.iter().map(|&(a, b)| c(a, b)).collect();
            let n = s.len();
            let mut rng = rng_stream(seed, "rt");
            let l = (seed as usize) % (n + 1);
            let sup = uniform_support(&mut rng, n, l).unwrap();
            let sp = apply_mask(&s, &sup).unwrap();
            let r = reduce(&sp);
            prop_assert_eq!(&expand(&r, n).unwrap(), &sp.dense);
            let back = reduce(&SparseApprox { dense: expand(&r, n).unwrap(), support: sup });
            prop_assert_eq!(back, r);
        }
    }

    #[test]
    fn uniform_mask_mean_is_scaled_signal() {
        // E[mask(s)] = (L/N) s elementwise; each coordinate is a scaled
        // Bernoulli(L/N) mean, checked at 3 sigma.
        let (n, l, trials) = (12usize, 3usize, 20_000usize);
        let mut g = rng_stream(2, "signal");
        let s: Vec<_> = (0..n).map(|_| c(g.standard_normal(), 0.0)).collect();
        let mut acc = vec![0.0; n];
        let mut rng = rng_stream(2, "masks");
        for _ in 0..trials {
            let sp = apply_mask(&s, &uniform_support(&mut rng, n, l).unwrap()).unwrap();
            for (a, v) in acc.iter_mut().zip(&sp.dense) {
                *a += v.re;
            }
        }
        let p = l as f64 / n as f64;
        for j in 0..n {
            let mean = acc[j] / trials as f64;
            let sd = s[j].re.abs() * (p * (1.0 - p) / trials as f64).sqrt();
            assert!((mean - p * s[j].re).abs() <= 3.0 * sd, "coordinate {j}");
        }
    }
}
