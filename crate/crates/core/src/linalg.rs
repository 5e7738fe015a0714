//! Small dense linear algebra.
//!
//! Everything here is sized for the handful of states a strict-feedback
//! design carries (n ≤ ~8), so matrices are plain row-major `Vec<f64>` and
//! the symmetric eigen-solver is cyclic Jacobi.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use thiserror::Error;

/// Absolute tolerance on `|M_ij - M_ji|` before a matrix counts as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Default tolerance for definiteness checks.
pub const DEFINITENESS_TOL: f64 = 1e-9;

const JACOBI_OFF_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not symmetric (max |M_ij - M_ji| = {0:e})")]
    NonSymmetric(f64),
    #[error("matrix or vector contains NaN or Inf")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gain k{index} = {value} must be positive")]
    NonPositiveGain { index: usize, value: f64 },
    #[error("mu = {0} must be positive")]
    NonPositiveMu(f64),
    #[error("matrix dimension must be at least 1")]
    Empty,
    #[error("matrix is singular")]
    Singular,
    #[error("Jacobi iteration did not converge in {0} sweeps")]
    NoConvergence(usize),
}

/// Dense `n × n` real matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: Vec<f64>,
}

impl fmt::Debug for SquareMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[f64]> = self.data.chunks(self.n).collect();
        f.debug_struct("SquareMatrix").field("n", &self.n).field("rows", &rows).finish()
    }
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        assert!(n >= 1, "matrix dimension must be at least 1");
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = s;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds a matrix from row-major entries.
    pub fn from_row_major(n: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if n == 0 {
            return Err(LinalgError::Empty);
        }
        if data.len() != n * n {
            return Err(LinalgError::DimensionMismatch { expected: n * n, got: data.len() });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(LinalgError::DimensionMismatch { expected: n, got: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::from_row_major(n, data)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.n).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { n: self.n, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn trace(&self) -> f64 {
        (0..self.n).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|M_ij - M_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>, LinalgError> {
        if v.len() != self.n {
            return Err(LinalgError::DimensionMismatch { expected: self.n, got: v.len() });
        }
        Ok(self.data.chunks(self.n).map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect())
    }

    /// `(M + Mᵀ) / 2`.
    pub fn symmetrized(&self) -> Self {
        let t = self.transpose();
        let mut s = self + &t;
        for v in &mut s.data {
            *v *= 0.5;
        }
        s
    }

    /// Gauss-Jordan inverse with partial pivoting.
    pub fn inverse(&self) -> Result<Self, LinalgError> {
        let n = self.n;
        let mut a = self.clone();
        let mut inv = Self::identity(n);
        for col in 0..n {
            let pivot = (col..n).max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs())).unwrap_or(col);
            if a[(pivot, col)].abs() < 1e-300 {
                return Err(LinalgError::Singular);
            }
            if pivot != col {
                for k in 0..n {
                    a.data.swap(pivot * n + k, col * n + k);
                    inv.data.swap(pivot * n + k, col * n + k);
                }
            }
            let p = a[(col, col)];
            for k in 0..n {
                a[(col, k)] /= p;
                inv[(col, k)] /= p;
            }
            for row in 0..n {
                if row == col {
                    continue;
                }
                let factor = a[(row, col)];
                if factor == 0.0 {
                    continue;
                }
                for k in 0..n {
                    a[(row, k)] -= factor * a[(col, k)];
                    inv[(row, k)] -= factor * inv[(col, k)];
                }
            }
        }
        Ok(inv)
    }

    /// Places `blocks` along the diagonal.
    pub fn block_diag(blocks: &[&SquareMatrix]) -> Self {
        let n: usize = blocks.iter().map(|b| b.n).sum();
        let mut m = Self::zeros(n);
        let mut off = 0;
        for b in blocks {
            for i in 0..b.n {
                for j in 0..b.n {
                    m[(off + i, off + j)] = b[(i, j)];
                }
            }
            off += b.n;
        }
        m
    }
}

impl std::ops::Index<(usize, usize)> for SquareMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for SquareMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.n + j]
    }
}

impl Add for &SquareMatrix {
    type Output = SquareMatrix;
    fn add(self, rhs: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, rhs.n, "dimension mismatch in matrix add");
        SquareMatrix { n: self.n, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect() }
    }
}

impl Sub for &SquareMatrix {
    type Output = SquareMatrix;
    fn sub(self, rhs: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, rhs.n, "dimension mismatch in matrix sub");
        SquareMatrix { n: self.n, data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect() }
    }
}

impl Mul for &SquareMatrix {
    type Output = SquareMatrix;
    fn mul(self, rhs: &SquareMatrix) -> SquareMatrix {
        assert_eq!(self.n, rhs.n, "dimension mismatch in matrix mul");
        let n = self.n;
        let mut out = SquareMatrix::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }
}

fn check_symmetric(m: &SquareMatrix) -> Result<(), LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite);
    }
    let asym = m.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(LinalgError::NonSymmetric(asym));
    }
    Ok(())
}

/// Eigen-decomposition `M = Q Λ Qᵀ` of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `k` is the eigenvector for `values[k]`.
    pub vectors: SquareMatrix,
}

impl SymmetricEigen {
    pub fn reconstruct(&self) -> SquareMatrix {
        let lambda = SquareMatrix::from_diag(&self.values);
        &(&self.vectors * &lambda) * &self.vectors.transpose()
    }
}

/// Cyclic Jacobi rotations. Stops once the off-diagonal Frobenius norm drops
/// below 1e-12 (relative to the matrix scale when that exceeds one).
pub fn symmetric_eigen(m: &SquareMatrix) -> Result<SymmetricEigen, LinalgError> {
    check_symmetric(m)?;
    let n = m.dim();
    let mut a = m.symmetrized();
    let mut q = SquareMatrix::identity(n);
    let scale = a.max_abs().max(1.0);

    let off_norm = |a: &SquareMatrix| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = off_norm(&a) < JACOBI_OFF_TOL * scale;
    let mut sweep = 0;
    while !converged && sweep < JACOBI_MAX_SWEEPS {
        for p in 0..n {
            for r in (p + 1)..n {
                let apr = a[(p, r)];
                if apr.abs() < f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(r, r)] - a[(p, p)]) / (2.0 * apr);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akr = a[(k, r)];
                    a[(k, p)] = c * akp - s * akr;
                    a[(k, r)] = s * akp + c * akr;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let ark = a[(r, k)];
                    a[(p, k)] = c * apk - s * ark;
                    a[(r, k)] = s * apk + c * ark;
                }
                for k in 0..n {
                    let qkp = q[(k, p)];
                    let qkr = q[(k, r)];
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
        sweep += 1;
        converged = off_norm(&a) < JACOBI_OFF_TOL * scale;
    }
    if !converged {
        return Err(LinalgError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = SquareMatrix::zeros(n);
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, col)] = q[(k, src)];
        }
    }
    Ok(SymmetricEigen { values, vectors })
}

/// All eigenvalues of a symmetric matrix, ascending.
pub fn symmetric_eigenvalues(m: &SquareMatrix) -> Result<Vec<f64>, LinalgError> {
    symmetric_eigen(m).map(|e| e.values)
}

pub fn max_eigenvalue(m: &SquareMatrix) -> Result<f64, LinalgError> {
    symmetric_eigenvalues(m).map(|v| *v.last().expect("n >= 1"))
}

/// True iff the largest eigenvalue is `<= tol`.
pub fn is_negative_semidefinite(m: &SquareMatrix, tol: f64) -> Result<bool, LinalgError> {
    Ok(max_eigenvalue(m)? <= tol)
}

pub fn is_positive_definite(m: &SquareMatrix) -> Result<bool, LinalgError> {
    Ok(symmetric_eigenvalues(m)?[0] > 0.0)
}

/// `vᵀ M v`.
pub fn quadratic_form(m: &SquareMatrix, v: &[f64]) -> Result<f64, LinalgError> {
    let mv = m.mul_vec(v)?;
    Ok(v.iter().zip(&mv).map(|(a, b)| a * b).sum())
}

/// `diag(-k1, ..., -kn)`.
pub fn build_a0(gains: &[f64]) -> Result<SquareMatrix, LinalgError> {
    if gains.is_empty() {
        return Err(LinalgError::Empty);
    }
    for (i, &k) in gains.iter().enumerate() {
        if !k.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        if k <= 0.0 {
            return Err(LinalgError::NonPositiveGain { index: i + 1, value: k });
        }
    }
    Ok(SquareMatrix::from_diag(&gains.iter().map(|k| -k).collect::<Vec<_>>()))
}

/// Tridiagonal skew-symmetric coupling matrix: `+g_i` on the superdiagonal,
/// `-g_i` on the subdiagonal. `n = g.len() + 1`.
pub fn build_ag(g: &[f64]) -> Result<SquareMatrix, LinalgError> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = g.len() + 1;
    let mut m = SquareMatrix::zeros(n);
    for (i, &gi) in g.iter().enumerate() {
        m[(i, i + 1)] = gi;
        m[(i + 1, i)] = -gi;
    }
    Ok(m)
}

/// `diag(mu^alpha, 1, ..., 1)`.
pub fn build_dmu(n: usize, mu: f64, alpha: f64) -> Result<SquareMatrix, LinalgError> {
    if n == 0 {
        return Err(LinalgError::Empty);
    }
    if !(mu > 0.0) || !mu.is_finite() {
        return Err(LinalgError::NonPositiveMu(mu));
    }
    let mut m = SquareMatrix::identity(n);
    m[(0, 0)] = mu.powf(alpha);
    Ok(m)
}
