//! Covariance matrices and their top eigenvalue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("power iteration did not converge after {iterations} iterations (last estimate {last_estimate}, last change {last_change:e})")]
    NotConverged {
        iterations: usize,
        last_estimate: f64,
        last_change: f64,
    },
    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose by {gap:e}")]
    NotSymmetric { row: usize, col: usize, gap: f64 },
    #[error("matrix has a negative Ritz value {0:e}")]
    NotPositiveSemidefinite(f64),
    #[error("matrix has zero dimension")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("matrix is not positive definite")]
    Singular,
}

/// Symmetric covariance matrix, stored densely or in one of two structured
/// forms that expose a cheap matrix-vector product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CovarianceMatrix {
    /// Row-major `dim x dim`.
    Dense { dim: usize, data: Vec<f64> },
    /// Symmetric Toeplitz band: `band[k]` is the value on the `k`-th off-diagonal.
    Toeplitz { dim: usize, band: Vec<f64> },
    /// `L L^T + diag(d)` with `L` row-major `dim x rank`.
    LowRank {
        dim: usize,
        rank: usize,
        loadings: Vec<f64>,
        diagonal: Vec<f64>,
    },
}

impl CovarianceMatrix {
    pub fn dense(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if dim == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != dim * dim {
            return Err(LinalgError::Shape(format!(
                "dense matrix of dim {dim} needs {} entries, got {}",
                dim * dim,
                data.len()
            )));
        }
        Ok(Self::Dense { dim, data })
    }

    pub fn diagonal(values: &[f64]) -> Result<Self, LinalgError> {
        let dim = values.len();
        let mut data = vec![0.0; dim * dim];
        for (i, v) in values.iter().enumerate() {
            data[i * dim + i] = *v;
        }
        Self::dense(dim, data)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Dense { dim, .. } | Self::Toeplitz { dim, .. } | Self::LowRank { dim, .. } => *dim,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        match self {
            Self::Dense { dim, data } => data[row * dim + col],
            Self::Toeplitz { band, .. } => band.get(row.abs_diff(col)).copied().unwrap_or(0.0),
            Self::LowRank {
                rank,
                loadings,
                diagonal,
                ..
            } => {
                let a = &loadings[row * rank..(row + 1) * rank];
                let b = &loadings[col * rank..(col + 1) * rank];
                let shared: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                shared + if row == col { diagonal[row] } else { 0.0 }
            }
        }
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let dim = self.dim();
        let mut out = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                out.push(self.get(i, j));
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.get(i, i)).sum()
    }

    /// `out = self * x`.
    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Dense { dim, data } => {
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &data[i * dim..(i + 1) * dim];
                    *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
                }
            }
            Self::Toeplitz { dim, band } => {
                let dim = *dim;
                for (i, o) in out.iter_mut().enumerate() {
                    let mut acc = band[0] * x[i];
                    for (k, &value) in band.iter().enumerate().skip(1) {
                        if i >= k {
                            acc += value * x[i - k];
                        }
                        if i + k < dim {
                            acc += value * x[i + k];
                        }
                    }
                    *o = acc;
                }
            }
            Self::LowRank {
                dim,
                rank,
                loadings,
                diagonal,
            } => {
                let mut factor = vec![0.0; *rank];
                for i in 0..*dim {
                    for (k, f) in factor.iter_mut().enumerate() {
                        *f += loadings[i * rank + k] * x[i];
                    }
                }
                for (i, o) in out.iter_mut().enumerate() {
                    let row = &loadings[i * rank..(i + 1) * rank];
                    *o = row.iter().zip(&factor).map(|(a, b)| a * b).sum::<f64>() + diagonal[i] * x[i];
                }
            }
        }
    }

    /// Checks symmetry within 1e-12 and that the smallest Ritz value found by
    /// shifted power iteration is not below -1e-9.
    pub fn validate(&self) -> Result<(), LinalgError> {
        let dim = self.dim();
        if dim == 0 {
            return Err(LinalgError::Empty);
        }
        if let Self::Dense { data, .. } = self {
            for i in 0..dim {
                for j in (i + 1)..dim {
                    let gap = (data[i * dim + j] - data[j * dim + i]).abs();
                    if gap > 1e-12 {
                        return Err(LinalgError::NotSymmetric { row: i, col: j, gap });
                    }
                }
            }
        }
        let smallest = self.min_ritz_value(0)?;
        if smallest < -1e-9 {
            return Err(LinalgError::NotPositiveSemidefinite(smallest));
        }
        Ok(())
    }

    /// Estimate of the smallest eigenvalue via power iteration on
    /// `shift * I - self`, where `shift` is a Gershgorin upper bound.
    fn min_ritz_value(&self, seed: u64) -> Result<f64, LinalgError> {
        let dim = self.dim();
        let shift = (0..dim)
            .map(|i| (0..dim).map(|j| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0f64, f64::max);
        let mut x = start_vector(dim, seed);
        let mut y = vec![0.0; dim];
        let mut estimate = f64::NAN;
        for _ in 0..5_000 {
            self.mul_vec(&x, &mut y);
            let rayleigh: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
            for (yi, xi) in y.iter_mut().zip(&x) {
                *yi = shift * xi - *yi;
            }
            let norm = l2(&y);
            if norm == 0.0 {
                return Ok(rayleigh);
            }
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi = yi / norm;
            }
            if (rayleigh - estimate).abs() <= 1e-12 * shift.max(1.0) {
                return Ok(rayleigh);
            }
            estimate = rayleigh;
        }
        Ok(estimate)
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Deterministic unit start vector with strictly positive entries.
///
/// Positive entries guarantee a nonzero component along the Perron vector of
/// any matrix with nonnegative entries.
fn start_vector(dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_0e16);
    let mut x: Vec<f64> = (0..dim).map(|_| 0.5 + rng.random::<f64>()).collect();
    let norm = l2(&x);
    x.iter_mut().for_each(|v| *v /= norm);
    x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerIterationOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for PowerIterationOptions {
    fn default() -> Self {
        Self {
            tol: 1e-13,
            max_iter: 200_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopEigen {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration.
///
/// Stops once consecutive Rayleigh quotients differ by at most
/// `tol * max(1, lambda)`. If a step lowers the Rayleigh quotient (a sign of
/// oscillation between eigen-directions), the new iterate is averaged with
/// the previous one before continuing.
pub fn power_iteration(
    matrix: &CovarianceMatrix,
    opts: PowerIterationOptions,
) -> Result<TopEigen, LinalgError> {
    let dim = matrix.dim();
    if dim == 0 {
        return Err(LinalgError::Empty);
    }
    let mut x = start_vector(dim, opts.seed);
    let mut y = vec![0.0; dim];
    let mut previous = f64::NEG_INFINITY;
    let mut change = f64::INFINITY;
    for iteration in 1..=opts.max_iter {
        matrix.mul_vec(&x, &mut y);
        let lambda: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let norm = l2(&y);
        if norm == 0.0 {
            return Ok(TopEigen {
                value: 0.0,
                vector: x,
                iterations: iteration,
            });
        }
        change = (lambda - previous).abs();
        if change <= opts.tol * lambda.max(1.0) {
            return Ok(TopEigen {
                value: lambda,
                vector: x,
                iterations: iteration,
            });
        }
        if lambda < previous - opts.tol * lambda.abs().max(1.0) {
            // Oscillation guard.
            for (yi, xi) in y.iter_mut().zip(&x) {
                *yi = *yi / norm + xi;
            }
            let avg_norm = l2(&y);
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi = yi / avg_norm;
            }
        } else {
            for (xi, yi) in x.iter_mut().zip(&y) {
                *xi = yi / norm;
            }
        }
        previous = lambda;
    }
    Err(LinalgError::NotConverged {
        iterations: opts.max_iter,
        last_estimate: previous,
        last_change: change,
    })
}

/// Operator norm (top eigenvalue) of a covariance matrix.
pub fn operator_norm(matrix: &CovarianceMatrix, tol: f64, max_iter: usize) -> Result<f64, LinalgError> {
    power_iteration(
        matrix,
        PowerIterationOptions {
            tol,
            max_iter,
            seed: 0,
        },
    )
    .map(|top| top.value)
}

/// Like [`operator_norm`] with the default options, but returns the last
/// iterate on non-convergence along with a `false` flag.
pub fn operator_norm_lenient(matrix: &CovarianceMatrix) -> (f64, bool) {
    match power_iteration(matrix, PowerIterationOptions::default()) {
        Ok(top) => (top.value, true),
        Err(LinalgError::NotConverged { last_estimate, .. }) => (last_estimate, false),
        Err(_) => (f64::NAN, false),
    }
}

/// Solves `A x = b` for symmetric positive definite `A` (row-major) by
/// Cholesky factorization.
pub fn cholesky_solve(a: &[f64], b: &[f64]) -> Result<Vec<f64>, LinalgError> {
    let n = b.len();
    if a.len() != n * n {
        return Err(LinalgError::Shape(format!("{}x{} system with {} entries", n, n, a.len())));
    }
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(sum > 0.0) {
                    return Err(LinalgError::Singular);
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * z[k]).sum();
        z[i] = (b[i] - s) / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = ((i + 1)..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i * n + i];
    }
    Ok(x)
}

/// Inverse of a symmetric positive definite matrix, column by column.
pub fn spd_inverse(a: &[f64], n: usize) -> Result<Vec<f64>, LinalgError> {
    let mut inv = vec![0.0; n * n];
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = cholesky_solve(a, &e)?;
        for i in 0..n {
            inv[i * n + j] = col[i];
        }
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiagonal_top(gamma0: f64, gamma1: f64, p: usize) -> f64 {
        gamma0 + 2.0 * gamma1.abs() * (std::f64::consts::PI / (p as f64 + 1.0)).cos()
    }

    #[test]
    fn identity_has_unit_norm() {
        let m = CovarianceMatrix::diagonal(&[1.0; 7]).unwrap();
        assert!((operator_norm(&m, 1e-13, 1000).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn toeplitz_matches_closed_form() {
        for &p in &[3usize, 10, 50] {
            let m = CovarianceMatrix::Toeplitz {
                dim: p,
                band: vec![1.25, 0.5],
            };
            let dense = CovarianceMatrix::dense(p, m.to_dense()).unwrap();
            let exact = tridiagonal_top(1.25, 0.5, p);
            let a = operator_norm(&m, 1e-14, 500_000).unwrap();
            let b = operator_norm(&dense, 1e-14, 500_000).unwrap();
            assert!((a - exact).abs() < 1e-8, "p={p}: {a} vs {exact}");
            assert!((b - exact).abs() < 1e-8);
        }
    }

    #[test]
    fn low_rank_matvec_matches_dense() {
        let m = CovarianceMatrix::LowRank {
            dim: 3,
            rank: 2,
            loadings: vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0],
            diagonal: vec![0.1, 0.2, 0.3],
        };
        let dense = CovarianceMatrix::dense(3, m.to_dense()).unwrap();
        let x = [0.3, -1.0, 2.0];
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        m.mul_vec(&x, &mut a);
        dense.mul_vec(&x, &mut b);
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
        assert!(m.validate().is_ok());
    }

    #[test]
    fn rank_one_norm_is_squared_loading_norm() {
        let m = CovarianceMatrix::LowRank {
            dim: 64,
            rank: 1,
            loadings: vec![1.0; 64],
            diagonal: vec![0.0; 64],
        };
        assert!((operator_norm(&m, 1e-13, 100).unwrap() - 64.0).abs() < 1e-10);
    }

    #[test]
    fn validation_rejects_asymmetric_and_indefinite() {
        let m = CovarianceMatrix::dense(2, vec![1.0, 0.5, 0.4, 1.0]).unwrap();
        assert!(matches!(m.validate(), Err(LinalgError::NotSymmetric { .. })));
        let m = CovarianceMatrix::dense(2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(m.validate(), Err(LinalgError::NotPositiveSemidefinite(_))));
        assert!(CovarianceMatrix::dense(2, vec![1.0]).is_err());
    }

    #[test]
    fn non_convergence_reports_last_iterate() {
        let m = CovarianceMatrix::Toeplitz {
            dim: 200,
            band: vec![1.25, 0.5],
        };
        match operator_norm(&m, 1e-15, 3) {
            Err(LinalgError::NotConverged {
                iterations,
                last_estimate,
                ..
            }) => {
                assert_eq!(iterations, 3);
                assert!(last_estimate > 1.0 && last_estimate <= 2.25);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_solves_small_system() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let x = cholesky_solve(&a, &[2.0, 1.0]).unwrap();
        assert!((4.0 * x[0] + 2.0 * x[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * x[0] + 3.0 * x[1] - 1.0).abs() < 1e-14);
        assert_eq!(cholesky_solve(&[1.0, 2.0, 2.0, 1.0], &[1.0, 1.0]), Err(LinalgError::Singular));
        let inv = spd_inverse(&a, 2).unwrap();
        assert!((inv[0] - 0.375).abs() < 1e-14 && (inv[1] + 0.25).abs() < 1e-14);
    }
}
