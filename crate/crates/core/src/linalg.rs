//! Dense matrix kernels and spectral estimators.
//!
//! Emulated kernels accumulate left to right in a fixed order so that
//! low-precision results are bit-reproducible.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::precision::{Context, Kernel, PrecisionSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {op} got {left:?} and {right:?}")]
    DimensionMismatch { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("matrix must be nonempty")]
    Empty,
    #[error("invalid probability row: {0}")]
    InvalidProbRow(String),
}

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows * cols != data.len() {
            return Err(LinalgError::DimensionMismatch {
                op: "from_vec",
                left: (rows, cols),
                right: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Columns `start..start + width`.
    pub fn col_block(&self, start: usize, width: usize) -> Matrix {
        Matrix::from_fn(self.rows, width, |i, j| self[(i, start + j)])
    }

    /// Rows `start..start + height`.
    pub fn row_block(&self, start: usize, height: usize) -> Matrix {
        Matrix::from_vec(height, self.cols, self.data[start * self.cols..(start + height) * self.cols].to_vec())
            .expect("row block in range")
    }

    pub fn set_col_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.rows, self.rows);
        for i in 0..self.rows {
            for j in 0..block.cols {
                self[(i, start + j)] = block[(i, j)];
            }
        }
    }

    pub fn set_row_block(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.cols, self.cols);
        let c = self.cols;
        self.data[start * c..(start + block.rows) * c].copy_from_slice(&block.data);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    /// Elementwise `self + other` in exact arithmetic.
    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    /// Exact (reference) product.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        gemm_with(self, other, &Kernel::reference()).expect("matmul shapes")
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// `A·B` under `spec` in the general kernel context.
pub fn gemm(a: &Matrix, b: &Matrix, spec: &PrecisionSpec) -> Result<Matrix, LinalgError> {
    gemm_with(a, b, &spec.kernel(Context::General))
}

/// `A·B` with every product rounded to the compute format, every partial
/// sum rounded to the accumulator, and the result stored in the compute
/// format. Accumulation runs over the inner index from left to right.
pub fn gemm_with(a: &Matrix, b: &Matrix, kernel: &Kernel) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch { op: "gemm", left: a.shape(), right: b.shape() });
    }
    let bt = b.transpose();
    let (m, n, k) = (a.rows, b.cols, a.cols);
    let mut out = Vec::with_capacity(m * n);
    if kernel.is_exact() {
        for i in 0..m {
            let ar = a.row(i);
            for j in 0..n {
                let br = bt.row(j);
                let mut acc = 0.0;
                for p in 0..k {
                    acc += ar[p] * br[p];
                }
                out.push(acc);
            }
        }
    } else {
        for i in 0..m {
            let ar = a.row(i);
            for j in 0..n {
                let br = bt.row(j);
                let mut acc = 0.0;
                for p in 0..k {
                    acc = kernel.acc(acc + kernel.op(ar[p] * br[p]));
                }
                out.push(kernel.op(acc));
            }
        }
    }
    Ok(Matrix { rows: m, cols: n, data: out })
}

pub fn fro_norm(a: &Matrix) -> f64 {
    vec_norm(a.as_slice())
}

pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Power-iteration controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerIterConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

pub const POWER_ITER_SEED: u64 = 0xC0FFEE;

impl Default for PowerIterConfig {
    fn default() -> Self {
        Self { max_iters: 50, tol: 1e-8, seed: POWER_ITER_SEED }
    }
}

impl PowerIterConfig {
    /// The 2-3 step runtime budget: three iterations, no convergence test.
    pub fn three_step_budget() -> Self {
        Self { max_iters: 3, tol: 0.0, seed: POWER_ITER_SEED }
    }

    /// Tight settings for small matrices where exactness is cheap.
    pub fn precise() -> Self {
        Self { max_iters: 2000, tol: 1e-14, seed: POWER_ITER_SEED }
    }
}

/// A power-iteration estimate; `converged` is the warning flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn start_vector(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = vec_norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Largest singular value by power iteration on `AᵀA`.
pub fn spectral_norm(a: &Matrix, cfg: &PowerIterConfig) -> Result<SpectralEstimate, LinalgError> {
    if a.is_empty() {
        return Err(LinalgError::Empty);
    }
    let mut v = start_vector(a.cols, cfg.seed);
    normalize(&mut v);
    let mut sigma = 0.0;
    let mut u = vec![0.0; a.rows];
    for it in 1..=cfg.max_iters.max(1) {
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = dot(a.row(i), &v);
        }
        let next = vec_norm(&u);
        let mut w = vec![0.0; a.cols];
        for (i, &ui) in u.iter().enumerate() {
            for (wj, &aij) in w.iter_mut().zip(a.row(i)) {
                *wj += aij * ui;
            }
        }
        let done = (next - sigma).abs() <= cfg.tol * next.max(f64::MIN_POSITIVE);
        sigma = next;
        if normalize(&mut w) == 0.0 {
            return Ok(SpectralEstimate { value: sigma, iterations: it, converged: true });
        }
        v = w;
        if done && it > 1 {
            return Ok(SpectralEstimate { value: sigma, iterations: it, converged: true });
        }
    }
    Ok(SpectralEstimate { value: sigma, iterations: cfg.max_iters, converged: cfg.tol == 0.0 })
}

/// All singular values, descending, via dense SVD.
pub fn singular_values(a: &Matrix) -> Vec<f64> {
    if a.is_empty() {
        return Vec::new();
    }
    let sv = a.to_nalgebra().singular_values();
    let mut out: Vec<f64> = sv.iter().copied().collect();
    out.sort_by(|x, y| y.total_cmp(x));
    out
}

/// `σ_max / (σ_min + λ)` over the `min(rows, cols)` singular values.
pub fn cond_ridge(a: &Matrix, lambda: f64) -> f64 {
    let sv = singular_values(a);
    match (sv.first(), sv.last()) {
        (Some(&max), Some(&min)) => max / (min + lambda),
        _ => f64::NAN,
    }
}

/// Row-wise softmax with max shift. Under emulation the shift, `exp`, each
/// partial sum, and the division are rounded.
pub fn softmax_rows(s: &Matrix, spec: &PrecisionSpec) -> Matrix {
    softmax_rows_with(s, &spec.kernel(Context::General))
}

pub fn softmax_rows_with(s: &Matrix, kernel: &Kernel) -> Matrix {
    let mut out = Matrix::zeros(s.rows, s.cols);
    for i in 0..s.rows {
        softmax_into(s.row(i), out.row_mut(i), kernel);
    }
    out
}

pub(crate) fn softmax_into(row: &[f64], out: &mut [f64], kernel: &Kernel) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = kernel.op(kernel.op(x - max).exp());
        *o = e;
        sum = kernel.acc(sum + e);
    }
    for o in out.iter_mut() {
        *o = kernel.op(*o / sum);
    }
}

/// A probability vector: nonnegative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow(Vec<f64>);

impl ProbRow {
    pub const SUM_TOL: f64 = 1e-12;

    pub fn new(p: Vec<f64>) -> Result<Self, LinalgError> {
        Self::with_tolerance(p, Self::SUM_TOL)
    }

    pub fn with_tolerance(p: Vec<f64>, tol: f64) -> Result<Self, LinalgError> {
        if p.is_empty() {
            return Err(LinalgError::Empty);
        }
        if let Some(x) = p.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
            return Err(LinalgError::InvalidProbRow(format!("entry {x} is not a probability")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(LinalgError::InvalidProbRow(format!("sum {sum} differs from 1")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `‖Diag(p) − ppᵀ‖₂` with default precise power iteration.
pub fn softmax_jac_norm(p: &ProbRow) -> f64 {
    softmax_jac_norm_with(p.as_slice(), &PowerIterConfig::precise())
}

/// Power iteration on `J(p) = Diag(p) − ppᵀ`, restricted to the complement
/// of the all-ones vector. `J` is applied implicitly in `O(n)`.
pub fn softmax_jac_norm_with(p: &[f64], cfg: &PowerIterConfig) -> f64 {
    let n = p.len();
    if n < 2 {
        return 0.0;
    }
    let project = |v: &mut [f64]| {
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
    };
    let mut v = start_vector(n, cfg.seed);
    project(&mut v);
    if normalize(&mut v) == 0.0 {
        return 0.0;
    }
    let mut w = vec![0.0; n];
    let mut lambda = 0.0;
    for _ in 0..cfg.max_iters.max(1) {
        let pv = dot(p, &v);
        for i in 0..n {
            w[i] = p[i] * v[i] - p[i] * pv;
        }
        project(&mut w);
        let next = dot(&v, &w).max(0.0);
        let norm = normalize(&mut w);
        let done = (next - lambda).abs() <= cfg.tol * next.max(f64::MIN_POSITIVE);
        lambda = next;
        if norm == 0.0 || done {
            break;
        }
        std::mem::swap(&mut v, &mut w);
    }
    lambda
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::{Accumulate, FpFormat};
    use approx::assert_relative_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn gemm_identity_and_zero() {
        let i2 = Matrix::identity(2);
        assert_eq!(gemm(&i2, &i2, &PrecisionSpec::reference()).unwrap(), i2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = randn(3, 4, &mut rng);
        for spec in [PrecisionSpec::native(FpFormat::Fp16), PrecisionSpec::native(FpFormat::Bf16)] {
            let z = gemm(&a, &Matrix::zeros(4, 2), &spec).unwrap();
            assert!(z.as_slice().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn gemm_rejects_bad_shapes() {
        let err = gemm(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3), &PrecisionSpec::reference());
        assert!(matches!(err, Err(LinalgError::DimensionMismatch { .. })));
    }

    #[test]
    fn gemm_fp16_error_within_first_order_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = PrecisionSpec::native(FpFormat::Fp16);
        let eps = FpFormat::Fp16.eps_mach();
        for _ in 0..1000 {
            let a = randn(8, 8, &mut rng);
            let b = randn(8, 8, &mut rng);
            let exact = a.matmul(&b);
            let approx = gemm(&a, &b, &spec).unwrap();
            let err = fro_norm(&approx.sub(&exact));
            assert!(err <= 8.0 * eps * fro_norm(&a) * fro_norm(&b));
        }
    }

    #[test]
    fn gemm_error_shrinks_with_fp32_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let native = PrecisionSpec::native(FpFormat::Fp16);
        let wide = PrecisionSpec::new(FpFormat::Fp16, Accumulate::Fp32);
        for _ in 0..100 {
            let a = randn(8, 8, &mut rng);
            let b = randn(8, 8, &mut rng);
            let exact = a.matmul(&b);
            let e_native = fro_norm(&gemm(&a, &b, &native).unwrap().sub(&exact));
            let e_wide = fro_norm(&gemm(&a, &b, &wide).unwrap().sub(&exact));
            assert!(e_native >= e_wide, "{e_native} < {e_wide}");
        }
    }

    #[test]
    fn spectral_norm_small_cases() {
        let cfg = PowerIterConfig::default();
        assert_relative_eq!(spectral_norm(&Matrix::identity(3), &cfg).unwrap().value, 1.0, epsilon = 1e-12);
        assert_relative_eq!(spectral_norm(&Matrix::diag(&[3.0, 1.0]), &cfg).unwrap().value, 3.0, epsilon = 1e-9);
        assert_eq!(spectral_norm(&Matrix::zeros(0, 0), &cfg), Err(LinalgError::Empty));
    }

    #[test]
    fn spectral_norm_matches_dense_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PowerIterConfig::precise();
        for _ in 0..50 {
            let a = randn(10, 10, &mut rng);
            let oracle = a.to_nalgebra().singular_values().max();
            let est = spectral_norm(&a, &cfg).unwrap();
            assert!((est.value - oracle).abs() <= 1e-6 * oracle, "{} vs {}", est.value, oracle);
        }
    }

    #[test]
    fn three_step_budget_flags_unconverged_only_when_tolerance_given() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = randn(12, 12, &mut rng);
        let est = spectral_norm(&a, &PowerIterConfig::three_step_budget()).unwrap();
        assert_eq!(est.iterations, 3);
        let strict = PowerIterConfig { max_iters: 2, tol: 1e-15, seed: POWER_ITER_SEED };
        assert!(!spectral_norm(&a, &strict).unwrap().converged);
    }

    #[test]
    fn cond_ridge_examples() {
        assert_relative_eq!(cond_ridge(&Matrix::identity(4), 0.0), 1.0, epsilon = 1e-12);
        assert_relative_eq!(cond_ridge(&Matrix::diag(&[2.0, 1.0]), 0.0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(cond_ridge(&Matrix::diag(&[1.0, 0.0]), 1e-6), 1e6, max_relative = 1e-9);
    }

    #[test]
    fn softmax_examples() {
        let spec = PrecisionSpec::reference();
        let p = softmax_rows(&Matrix::from_rows(&[vec![0.0, 0.0]]), &spec);
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let p = softmax_rows(&Matrix::from_rows(&[vec![1000.0, 0.0]]), &spec);
        assert_eq!(p.row(0), &[1.0, 0.0]);
        let s = Matrix::from_rows(&[vec![0.25, -1.5, 2.0, 0.0]]);
        let shifted = s.map(|x| x + 7.5);
        assert_eq!(softmax_rows(&s, &spec), softmax_rows(&shifted, &spec));
    }

    #[test]
    fn emulated_softmax_rows_sum_to_one_within_n_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for fmt in [FpFormat::Fp16, FpFormat::Bf16] {
            let s = randn(16, 16, &mut rng).scale(3.0);
            let p = softmax_rows(&s, &PrecisionSpec::native(fmt));
            for i in 0..16 {
                let sum: f64 = p.row(i).iter().sum();
                assert!((sum - 1.0).abs() <= 16.0 * fmt.eps_mach());
            }
        }
    }

    #[test]
    fn jac_norm_examples() {
        let half = ProbRow::new(vec![0.5, 0.5]).unwrap();
        assert_relative_eq!(softmax_jac_norm(&half), 0.5, epsilon = 1e-12);
        let onehot = ProbRow::new(vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(softmax_jac_norm(&onehot), 0.0);
        assert_eq!(softmax_jac_norm(&ProbRow::new(vec![1.0]).unwrap()), 0.0);
    }

    #[test]
    fn jac_norm_matches_dense_eigendecomposition() {
        let p = vec![0.7, 0.2, 0.1];
        let j = nalgebra::DMatrix::from_fn(3, 3, |i, k| if i == k { p[i] } else { 0.0 } - p[i] * p[k]);
        let oracle = j.symmetric_eigen().eigenvalues.max();
        let est = softmax_jac_norm(&ProbRow::new(p).unwrap());
        assert!((est - oracle).abs() <= 1e-9, "{est} vs {oracle}");
    }

    #[test]
    fn prob_row_validation() {
        assert!(ProbRow::new(vec![0.5, 0.6]).is_err());
        assert!(ProbRow::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbRow::new(vec![]).is_err());
    }
}
