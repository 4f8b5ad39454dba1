//! Symmetric matrices, half-vectorization and the duplication matrix.
//!
//! `vech` stacks the lower triangle column by column: column 1 rows 1..q,
//! column 2 rows 2..q, and so on. With that ordering the duplication matrix
//! `R_q` satisfying `vec(A) = R_q vech(A)` is the standard one.

use nalgebra::{DMatrix, DVector};
use serde::{Serialize, Serializer};

use crate::{Error, Real, Result};

/// Relative asymmetry accepted (and averaged away) by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A symmetric `q x q` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix<T: Real> {
    inner: DMatrix<T>,
}

impl<T: Real> SymMatrix<T> {
    /// Accepts `a` if `max|A - A^T| <= 1e-10 * max|A|`, symmetrizing by averaging.
    pub fn new(a: DMatrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "expected a square matrix, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if a.nrows() == 0 {
            return Err(Error::ZeroDimension);
        }
        let scale = a.amax();
        let asym = (&a - a.transpose()).amax();
        if asym > T::of(SYMMETRY_TOL) * scale {
            return Err(Error::NotSymmetric {
                asymmetry: asym.to_f64_lossy(),
            });
        }
        let inner = (&a + a.transpose()) * T::of(0.5);
        Ok(Self { inner })
    }

    pub fn zeros(q: usize) -> Self {
        Self {
            inner: DMatrix::zeros(q, q),
        }
    }

    pub fn identity(q: usize) -> Self {
        Self {
            inner: DMatrix::identity(q, q),
        }
    }

    /// Wraps a matrix that is symmetric by construction, averaging with its
    /// transpose to scrub rounding.
    pub(crate) fn from_symmetric(a: DMatrix<T>) -> Self {
        let inner = (&a + a.transpose()) * T::of(0.5);
        Self { inner }
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.inner
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.inner
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.inner[(r, c)]
    }

    pub fn scale(&self, c: T) -> Self {
        Self {
            inner: &self.inner * c,
        }
    }

    pub fn min_eigenvalue(&self) -> T {
        self.inner
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .copied()
            .fold(T::max_value().unwrap(), |a, b| a.min(b))
    }

    /// Nearest positive semidefinite matrix in Frobenius norm: negative
    /// eigenvalues are clipped to zero.
    pub fn psd_projection(&self) -> Self {
        let eig = self.inner.clone().symmetric_eigen();
        if eig.eigenvalues.iter().all(|&l| l >= T::zero()) {
            return self.clone();
        }
        let clipped = eig.eigenvalues.map(|l| l.max(T::zero()));
        let v = &eig.eigenvectors;
        Self::from_symmetric(v * DMatrix::from_diagonal(&clipped) * v.transpose())
    }

    /// Correlation matrix. Rows/columns whose variance is below `1e-12`
    /// are filled with NaN (undefined).
    pub fn correlation(&self) -> Self {
        let q = self.dim();
        let guard = T::of(1e-12);
        let sd: Vec<Option<T>> = (0..q)
            .map(|k| {
                let v = self.inner[(k, k)];
                (v >= guard).then(|| v.sqrt())
            })
            .collect();
        let nan = T::of(f64::NAN);
        let inner = DMatrix::from_fn(q, q, |r, c| match (sd[r], sd[c]) {
            (Some(_), Some(_)) if r == c => T::one(),
            (Some(a), Some(b)) => self.inner[(r, c)] / (a * b),
            _ => nan,
        });
        Self { inner }
    }

    pub fn vech(&self) -> DVector<T> {
        vech(&self.inner)
    }

    pub fn vec(&self) -> DVector<T> {
        vec(&self.inner)
    }

    /// Rebuilds a symmetric matrix from its half-vectorization.
    pub fn from_vech(q: usize, v: &DVector<T>) -> Result<Self> {
        if v.len() != vech_len(q) {
            return Err(Error::DimensionMismatch(format!(
                "vech of a {q}x{q} matrix has {} entries, got {}",
                vech_len(q),
                v.len()
            )));
        }
        let mut a = DMatrix::zeros(q, q);
        let mut k = 0;
        for c in 0..q {
            for r in c..q {
                a[(r, c)] = v[k];
                a[(c, r)] = v[k];
                k += 1;
            }
        }
        Ok(Self { inner: a })
    }

    /// Row-major nested vectors, convenient for reports.
    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.inner
            .row_iter()
            .map(|r| r.iter().map(|x| x.to_f64_lossy()).collect())
            .collect()
    }
}

impl<T: Real> Serialize for SymMatrix<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

pub fn vech_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Half-vectorization of a square matrix (lower triangle, column-major).
///
/// Use [`SymMatrix::vech`] when symmetry must be enforced; this free function
/// simply reads the lower triangle.
pub fn vech<T: Real>(a: &DMatrix<T>) -> DVector<T> {
    let q = a.nrows();
    let mut out = Vec::with_capacity(vech_len(q));
    for c in 0..q {
        for r in c..q {
            out.push(a[(r, c)]);
        }
    }
    DVector::from_vec(out)
}

/// Column stacking.
pub fn vec<T: Real>(a: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(a.as_slice())
}

/// Duplication matrix `R_q` with `vec(A) = R_q vech(A)` for symmetric `A`.
#[derive(Debug, Clone)]
pub struct DuplicationMap<T: Real> {
    q: usize,
    matrix: DMatrix<T>,
}

impl<T: Real> DuplicationMap<T> {
    pub fn new(q: usize) -> Result<Self> {
        if q < 1 {
            return Err(Error::ZeroDimension);
        }
        let mut matrix = DMatrix::zeros(q * q, vech_len(q));
        for c in 0..q {
            for r in 0..q {
                let (lo, hi) = if r >= c { (c, r) } else { (r, c) };
                // position of (hi, lo) in the lower-triangle stacking
                let k = lo * q - lo * (lo + 1) / 2 + hi;
                matrix[(c * q + r, k)] = T::one();
            }
        }
        Ok(Self { q, matrix })
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    /// `(R_q^T R_q)^{-1} R_q^T`, the left inverse mapping `vec` back to `vech`.
    /// `R_q^T R_q` is diagonal (1 on diagonal positions, 2 off-diagonal).
    pub fn left_inverse(&self) -> DMatrix<T> {
        let rtr = self.matrix.transpose() * &self.matrix;
        let inv = DMatrix::from_diagonal(&rtr.diagonal().map(|d| T::one() / d));
        inv * self.matrix.transpose()
    }
}

pub(crate) fn spd_inverse<T: Real>(a: &DMatrix<T>) -> Option<DMatrix<T>> {
    let chol = a.clone().cholesky()?;
    let inv = chol.inverse();
    Some((&inv + inv.transpose()) * T::of(0.5))
}

/// Cholesky solve that refuses numerically singular systems.
pub(crate) fn solve_checked<T: Real>(gram: &DMatrix<T>, rhs: &DVector<T>) -> Option<DVector<T>> {
    let chol = gram.clone().cholesky()?;
    let l = chol.l_dirty();
    let diag: Vec<T> = (0..gram.nrows()).map(|i| l[(i, i)]).collect();
    let max = diag.iter().copied().fold(T::zero(), |a, b| a.max(b));
    let min = diag.iter().copied().fold(max, |a, b| a.min(b));
    if !(min > T::zero()) || (min / max) * (min / max) < T::eps() * T::of(1e3) {
        return None;
    }
    let theta = chol.solve(rhs);
    theta.iter().all(|v| v.finite()).then_some(theta)
}

/// Numerical rank via singular values relative to the largest one.
pub(crate) fn rank<T: Real>(a: &DMatrix<T>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().singular_values();
    let smax = sv.iter().copied().fold(T::zero(), |x, y| x.max(y));
    if smax == T::zero() {
        return 0;
    }
    let n = a.nrows().max(a.ncols());
    let tol = smax * T::eps() * T::of_usize(n) * T::of(10.0);
    sv.iter().filter(|&&s| s > tol).count()
}
