//! Random measurement matrices for linear compression.
//!
//! Columns of the raw matrix are drawn uniformly on the unit sphere in
//! `R^M` and the whole matrix is then divided by `c * ||A'||_op` with
//! `c > 1`, which keeps the plain IHT gradient step contractive.
//! The matrix is real and acts identically on the real and imaginary
//! parts of a baseband vector.

use std::io::{Read, Write};

use num_complex::Complex64;

use crate::error::{check_len, Error, Result};
use crate::numcore::{cnorm_sq, RngStream};

const DUMP_MAGIC: &[u8; 4] = b"AFLM";

pub const POWER_ITERATION_TOL: f64 = 1e-10;
pub const POWER_ITERATION_MAX_ITERS: usize = 10_000;

/// Dense row-major real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("RealMatrix::from_rows", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self {
            rows: n,
            cols: n,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|x| *x *= factor);
    }

    pub fn column_norm(&self, j: usize) -> f64 {
        (0..self.rows)
            .map(|i| self.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Gram matrix of the rows (`A A^T`) when `rows <= cols`, otherwise of
    /// the columns (`A^T A`). Both share the nonzero spectrum.
    fn small_gram(&self) -> (usize, Vec<f64>) {
        if self.rows <= self.cols {
            let m = self.rows;
            let mut g = vec![0.0; m * m];
            for i in 0..m {
                for k in i..m {
                    let v: f64 = self.row(i).iter().zip(self.row(k)).map(|(a, b)| a * b).sum();
                    g[i * m + k] = v;
                    g[k * m + i] = v;
                }
            }
            (m, g)
        } else {
            let n = self.cols;
            let mut g = vec![0.0; n * n];
            for i in 0..self.rows {
                let r = self.row(i);
                for j in 0..n {
                    let rj = r[j];
                    for (gk, rk) in g[j * n..(j + 1) * n].iter_mut().zip(r) {
                        *gk += rj * rk;
                    }
                }
            }
            (n, g)
        }
    }
}

/// Largest singular value by power iteration on the smaller Gram matrix.
///
/// Stops when the Rayleigh quotient changes by less than
/// [`POWER_ITERATION_TOL`] relative; fails after
/// [`POWER_ITERATION_MAX_ITERS`] iterations with the last estimate.
pub fn operator_norm(a: &RealMatrix) -> Result<f64> {
    if a.data.iter().all(|&x| x == 0.0) {
        return Err(Error::invalid("operator_norm", "zero matrix"));
    }
    let (n, g) = a.small_gram();
    let mut rng = RngStream::new(0, "power-iteration");
    let mut v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    normalize(&mut v);
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for it in 1..=POWER_ITERATION_MAX_ITERS {
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = g[i * n..(i + 1) * n].iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // start vector orthogonal to the range; restart elsewhere
            v = (0..n).map(|_| rng.standard_normal()).collect();
            normalize(&mut v);
            continue;
        }
        v.iter_mut().zip(&w).for_each(|(vi, wi)| *vi = wi / norm);
        if it > 1 && (next - lambda).abs() <= POWER_ITERATION_TOL * next.abs() {
            return Ok(next.max(0.0).sqrt());
        }
        lambda = next;
    }
    Err(Error::NoConvergence {
        iterations: POWER_ITERATION_MAX_ITERS,
        estimate: lambda.max(0.0).sqrt(),
    })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMatrix {
    matrix: RealMatrix,
    /// Column-major copy for sparse products.
    columns: Vec<f64>,
    op_norm_bound: f64,
    seed_label: String,
}

impl MeasurementMatrix {
    /// Wraps an explicit matrix after checking its operator norm against
    /// `op_norm_bound`.
    pub fn from_matrix(matrix: RealMatrix, op_norm_bound: f64, seed_label: impl Into<String>) -> Result<Self> {
        let norm = operator_norm(&matrix)?;
        if norm > op_norm_bound * (1.0 + 1e-9) {
            return Err(Error::invalid(
                "op_norm_bound",
                format!("operator norm {norm} exceeds bound {op_norm_bound}"),
            ));
        }
        Ok(Self::assemble(matrix, op_norm_bound, seed_label.into()))
    }

    fn assemble(matrix: RealMatrix, op_norm_bound: f64, seed_label: String) -> Self {
        let (m, n) = (matrix.rows, matrix.cols);
        let mut columns = vec![0.0; m * n];
        for i in 0..m {
            for (j, &a) in matrix.row(i).iter().enumerate() {
                columns[j * m + i] = a;
            }
        }
        Self {
            matrix,
            columns,
            op_norm_bound,
            seed_label,
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.rows
    }

    pub fn cols(&self) -> usize {
        self.matrix.cols
    }

    pub fn matrix(&self) -> &RealMatrix {
        &self.matrix
    }

    pub fn op_norm_bound(&self) -> f64 {
        self.op_norm_bound
    }

    pub fn seed_label(&self) -> &str {
        &self.seed_label
    }

    /// `A * s` on a dense vector of length `N`.
    pub fn compress(&self, s: &[Complex64]) -> Result<Vec<Complex64>> {
        check_len("compress", self.cols(), s.len())?;
        let support: Vec<usize> = (0..self.cols()).collect();
        self.compress_on_support(s, &support)
    }

    /// `A * s` where `s` is known to vanish outside `support`.
    pub fn compress_on_support(&self, s: &[Complex64], support: &[usize]) -> Result<Vec<Complex64>> {
        check_len("compress_on_support", self.cols(), s.len())?;
        let m = self.rows();
        let mut re = vec![0.0; m];
        let mut im = vec![0.0; m];
        let col = |j: usize| &self.columns[j * m..(j + 1) * m];
        // four columns per pass, as in the adjoint
        let mut blocks = support.chunks_exact(4);
        for js in blocks.by_ref() {
            let (c0, c1, c2, c3) = (col(js[0]), col(js[1]), col(js[2]), col(js[3]));
            let (x0, x1, x2, x3) = (s[js[0]], s[js[1]], s[js[2]], s[js[3]]);
            let (re, im) = (&mut re[..m], &mut im[..m]);
            for i in 0..m {
                let (a0, a1, a2, a3) = (c0[i], c1[i], c2[i], c3[i]);
                re[i] += a0 * x0.re + a1 * x1.re + a2 * x2.re + a3 * x3.re;
                im[i] += a0 * x0.im + a1 * x1.im + a2 * x2.im + a3 * x3.im;
            }
        }
        for &j in blocks.remainder() {
            let x = s[j];
            for ((r, i), &a) in re.iter_mut().zip(im.iter_mut()).zip(col(j)) {
                *r += a * x.re;
                *i += a * x.im;
            }
        }
        Ok(re.into_iter().zip(im).map(|(r, i)| Complex64::new(r, i)).collect())
    }

    /// `A^H * y = A^T * y` (the matrix is real).
    pub fn adjoint(&self, y: &[Complex64]) -> Result<Vec<Complex64>> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.cols()];
        self.adjoint_accumulate(y, &mut out)?;
        Ok(out)
    }

    /// `out += A^T * y`.
    pub fn adjoint_accumulate(&self, y: &[Complex64], out: &mut [Complex64]) -> Result<()> {
        check_len("adjoint", self.rows(), y.len())?;
        check_len("adjoint output", self.cols(), out.len())?;
        // Split real/imaginary accumulators and four rows per pass so the
        // inner loop vectorizes.
        let n = self.cols();
        let mut re: Vec<f64> = out.iter().map(|z| z.re).collect();
        let mut im: Vec<f64> = out.iter().map(|z| z.im).collect();
        let mut rows = (0..self.rows()).filter(|&i| y[i].re != 0.0 || y[i].im != 0.0).peekable();
        while rows.peek().is_some() {
            let block: Vec<usize> = rows.by_ref().take(4).collect();
            let (c, d): (Vec<f64>, Vec<f64>) = block.iter().map(|&i| (y[i].re, y[i].im)).chain(std::iter::repeat((0.0, 0.0))).take(4).unzip();
            let row = |b: usize| &self.matrix.row(block.get(b).copied().unwrap_or(block[0]))[..n];
            let (r0, r1, r2, r3) = (row(0), row(1), row(2), row(3));
            let (re, im) = (&mut re[..n], &mut im[..n]);
            for j in 0..n {
                let (a0, a1, a2, a3) = (r0[j], r1[j], r2[j], r3[j]);
                re[j] += a0 * c[0] + a1 * c[1] + a2 * c[2] + a3 * c[3];
                im[j] += a0 * d[0] + a1 * d[1] + a2 * d[2] + a3 * d[3];
            }
        }
        for ((o, r), i) in out.iter_mut().zip(re).zip(im) {
            *o = Complex64::new(r, i);
        }
        Ok(())
    }

    /// Raw dump: `"AFLM"`, `u32 M`, `u32 N`, `u32` reserved (zero), then
    /// `M*N` little-endian f64 in row-major order.
    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.cols() as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for x in &self.matrix.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

/// Reads a matrix written by [`MeasurementMatrix::write_binary`].
pub fn read_binary<R: Read>(mut r: R) -> Result<RealMatrix> {
    let bad = |reason: &str| Error::Format {
        path: "<matrix dump>".into(),
        reason: reason.to_string(),
    };
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(|_| bad("short header"))?;
    if &header[..4] != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    let word = |k: usize| u32::from_le_bytes(header[k..k + 4].try_into().unwrap()) as usize;
    let (m, n) = (word(4), word(8));
    let mut buf = vec![0u8; m * n * 8];
    r.read_exact(&mut buf).map_err(|_| bad("truncated body"))?;
    let data = buf
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    RealMatrix::from_rows(m, n, data)
}

/// Draws an `m x n` matrix with unit-sphere columns and rescales it to
/// operator norm `1/c`.
pub fn generate_matrix(rng: &mut RngStream, m: usize, n: usize, c: f64) -> Result<MeasurementMatrix> {
    if m == 0 || m >= n {
        return Err(Error::invalid(
            "compressed_len",
            format!("need 1 <= M < N, got M={m}, N={n}"),
        ));
    }
    if c.is_nan() || c <= 1.0 {
        return Err(Error::invalid("matrix_norm_margin", format!("need c > 1, got {c}")));
    }
    let raw = unit_column_matrix(rng, m, n);
    let norm = operator_norm(&raw)?;
    let mut matrix = raw;
    matrix.scale(1.0 / (c * norm));
    Ok(MeasurementMatrix::assemble(
        matrix,
        1.0 / c,
        format!("{}:{}", rng.master_seed(), rng.label()),
    ))
}

/// Columns drawn uniformly from the unit sphere in `R^m` (normalized
/// Gaussian draws), before any global rescaling.
pub fn unit_column_matrix(rng: &mut RngStream, m: usize, n: usize) -> RealMatrix {
    let mut data = vec![0.0; m * n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        loop {
            col.iter_mut().for_each(|x| *x = rng.standard_normal());
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (i, x) in col.iter().enumerate() {
                    data[i * n + j] = x / norm;
                }
                break;
            }
        }
    }
    RealMatrix {
        rows: m,
        cols: n,
        data,
    }
}

/// Largest `| ||A s||^2 - 1 |` over random unit-norm `l`-sparse vectors, an
/// empirical lower estimate of the restricted isometry constant.
pub fn rip_probe(a: &MeasurementMatrix, l: usize, trials: usize, rng: &mut RngStream) -> Result<f64> {
    let n = a.cols();
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let support = rng.subset(n, l)?;
        let mut s = vec![Complex64::new(0.0, 0.0); n];
        for &j in &support {
            s[j] = Complex64::new(rng.standard_normal(), 0.0);
        }
        let norm = cnorm_sq(&s).sqrt();
        if norm == 0.0 {
            continue;
        }
        s.iter_mut().for_each(|x| *x /= norm);
        let y = a.compress_on_support(&s, &support)?;
        worst = worst.max((cnorm_sq(&y) - 1.0).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{real_inner, rng_stream};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn hand_matrix() -> MeasurementMatrix {
        MeasurementMatrix::assemble(
            RealMatrix::from_rows(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap(),
            2f64.sqrt(),
            "hand".into(),
        )
    }

    /// Largest singular value of a 2x3 matrix from the closed-form
    /// eigenvalues of its 2x2 row Gram matrix.
    fn two_by_n_sigma_max(a: &RealMatrix) -> f64 {
        let dot = |i: usize, k: usize| -> f64 { a.row(i).iter().zip(a.row(k)).map(|(x, y)| x * y).sum() };
        let (p, q, r) = (dot(0, 0), dot(0, 1), dot(1, 1));
        let tr = p + r;
        let det = p * r - q * q;
        ((tr + (tr * tr - 4.0 * det).sqrt()) / 2.0).sqrt()
    }

    #[test]
    fn operator_norm_simple_cases() {
        assert!((operator_norm(&RealMatrix::identity(3)).unwrap() - 1.0).abs() < 1e-12);
        let d = RealMatrix::from_rows(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((operator_norm(&d).unwrap() - 3.0).abs() < 1e-9);
        let tall = RealMatrix::from_rows(3, 2, vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        assert!((operator_norm(&tall).unwrap() - 2.0).abs() < 1e-9);
        assert!(operator_norm(&RealMatrix::from_rows(1, 2, vec![0.0, 0.0]).unwrap()).is_err());
    }

    #[test]
    fn generated_two_by_three_matches_closed_form() {
        let mut rng = rng_stream(5, "matrix");
        let raw = unit_column_matrix(&mut rng_stream(5, "matrix"), 2, 3);
        let a = generate_matrix(&mut rng, 2, 3, 1.01).unwrap();
        let raw_sigma = two_by_n_sigma_max(&raw);
        for j in 0..3 {
            assert!((raw.column_norm(j) - 1.0).abs() < 1e-12);
            let expect = 1.0 / (1.01 * raw_sigma);
            assert!((a.matrix.column_norm(j) - expect).abs() < 1e-9 * expect);
        }
        assert!((two_by_n_sigma_max(a.matrix()) - 1.0 / 1.01).abs() < 1e-9);
        assert_eq!(a.op_norm_bound(), 1.0 / 1.01);
    }

    #[test]
    fn generate_rejects_bad_shapes() {
        let mut rng = rng_stream(1, "m");
        assert!(generate_matrix(&mut rng, 1, 1, 1.01).is_err());
        assert!(generate_matrix(&mut rng, 3, 2, 1.01).is_err());
        assert!(generate_matrix(&mut rng, 0, 2, 1.01).is_err());
        assert!(generate_matrix(&mut rng, 1, 2, 1.0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_matrix(&mut rng_stream(3, "matrix"), 8, 20, 1.01).unwrap();
        let b = generate_matrix(&mut rng_stream(3, "matrix"), 8, 20, 1.01).unwrap();
        assert_eq!(a.matrix().data(), b.matrix().data());
    }

    #[test]
    fn hand_matvecs() {
        let a = hand_matrix();
        let s = vec![c(1.0, 1.0), c(2.0, 0.0), c(0.0, 3.0)];
        assert_eq!(a.compress(&s).unwrap(), vec![c(1.0, 1.0), c(2.0, 3.0)]);
        assert_eq!(
            a.adjoint(&[c(1.0, 0.0), c(0.0, 1.0)]).unwrap(),
            vec![c(1.0, 0.0), c(0.0, 1.0), c(0.0, 1.0)]
        );
        assert_eq!(a.compress(&[c(0.0, 0.0); 3]).unwrap(), vec![c(0.0, 0.0); 2]);
        assert_eq!(a.adjoint(&[c(0.0, 0.0); 2]).unwrap(), vec![c(0.0, 0.0); 3]);
        assert!(a.compress(&s[..2]).is_err());
        assert!(a.adjoint(&s).is_err());
    }

    #[test]
    fn linearity_and_adjoint_identity() {
        let a = generate_matrix(&mut rng_stream(8, "matrix"), 6, 15, 1.01).unwrap();
        let mut g = rng_stream(8, "vecs");
        let s1: Vec<_> = (0..15).map(|_| g.complex_normal(1.0)).collect();
        let s2: Vec<_> = (0..15).map(|_| g.complex_normal(1.0)).collect();
        let y: Vec<_> = (0..6).map(|_| g.complex_normal(1.0)).collect();
        let alpha = 0.7;
        let mix: Vec<_> = s1.iter().zip(&s2).map(|(a, b)| a * alpha + b).collect();
        let lhs = a.compress(&mix).unwrap();
        let (c1, c2) = (a.compress(&s1).unwrap(), a.compress(&s2).unwrap());
        for ((l, x), z) in lhs.iter().zip(&c1).zip(&c2) {
            assert!((l - (x * alpha + z)).norm() < 1e-12);
        }
        let left = real_inner(&c1, &y);
        let right = real_inner(&s1, &a.adjoint(&y).unwrap());
        assert!((left - right).abs() < 1e-12);
        // the complex inner product <As, y> = <s, A^H y> as well
        let cl: Complex64 = c1.iter().zip(&y).map(|(p, q)| p * q.conj()).sum();
        let cr: Complex64 = s1.iter().zip(a.adjoint(&y).unwrap()).map(|(p, q)| p * q.conj()).sum();
        assert!((cl - cr).norm() < 1e-12);
    }

    #[test]
    fn compress_on_support_agrees_with_dense() {
        let a = generate_matrix(&mut rng_stream(4, "matrix"), 5, 12, 1.01).unwrap();
        let mut s = vec![c(0.0, 0.0); 12];
        s[2] = c(1.0, -2.0);
        s[9] = c(0.5, 0.5);
        let dense = a.compress(&s).unwrap();
        let sparse = a.compress_on_support(&s, &[2, 9]).unwrap();
        for (x, y) in dense.iter().zip(&sparse) {
            assert!((x - y).norm() < 1e-14);
        }
    }

    #[test]
    fn certified_contraction_on_random_unit_vectors() {
        let a = generate_matrix(&mut rng_stream(21, "matrix"), 40, 100, 1.01).unwrap();
        let mut g = rng_stream(21, "probe");
        for _ in 0..1000 {
            let mut u: Vec<_> = (0..100).map(|_| g.complex_normal(1.0)).collect();
            let n = cnorm_sq(&u).sqrt();
            u.iter_mut().for_each(|x| *x /= n);
            let y = a.compress(&u).unwrap();
            assert!(cnorm_sq(&y).sqrt() <= a.op_norm_bound() + 1e-9);
        }
    }

    #[test]
    fn rip_probe_desk_scale() {
        let a = generate_matrix(&mut rng_stream(1, "matrix"), 128, 256, 1.01).unwrap();
        let delta = rip_probe(&a, 10, 500, &mut rng_stream(1, "rip")).unwrap();
        eprintln!("empirical RIP constant (N=256, M=128, L=10): {delta:.4}");
        assert!(delta < 1.0);
    }

    #[test]
    fn binary_dump_roundtrip() {
        let a = generate_matrix(&mut rng_stream(2, "matrix"), 3, 7, 1.01).unwrap();
        let mut buf = Vec::new();
        a.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"AFLM");
        assert_eq!(buf.len(), 16 + 3 * 7 * 8);
        assert_eq!(&read_binary(&buf[..]).unwrap(), a.matrix());
        assert!(read_binary(&buf[..20]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_binary(&bad[..]).is_err());
    }
}
