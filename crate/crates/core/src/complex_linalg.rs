//! Small dense complex matrices.
//!
//! Everything the noise model needs reduces to Hermitian positive-definite
//! systems: sampling with a covariance factor, and building unmixing weights
//! from `C^H S^-1 C`. The kernels here are Cholesky plus triangular solves on
//! row-major storage; matrices are at most a few dozen rows.

use std::fmt;
use std::ops::{Index, IndexMut, Mul};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

pub type C64 = Complex<f64>;

/// Absolute tolerance on `max |A - A^H|` for a matrix to count as Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("matrix is not Hermitian (max |A - A^H| = {max_dev:e})")]
    NotHermitian { max_dev: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite matrix entry at ({0}, {1})")]
    NonFinite(usize, usize),
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    /// Builds a matrix from row-major entries, rejecting wrong lengths and
    /// non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::DimensionMismatch(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(LinalgError::NonFinite(k / cols.max(1), k % cols.max(1)));
        }
        Ok(CMatrix { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self, LinalgError> {
        Self::from_vec(rows, cols, data.iter().map(|&v| C64::new(v, 0.0)).collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        CMatrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Conjugate transpose.
    pub fn hermitian(&self) -> CMatrix {
        CMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, s: f64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &CMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// `max |A - A^H|` over all entries; infinite for non-square input.
    pub fn hermitian_deviation(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut dev = 0.0f64;
        for i in 0..self.rows {
            for j in i..self.cols {
                dev = dev.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        dev
    }

    /// `(A + A^H) / 2`.
    pub fn symmetrized(&self) -> CMatrix {
        CMatrix::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)].conj()) * 0.5
        })
    }

    pub fn matmul(&self, rhs: &CMatrix) -> Result<CMatrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = CMatrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == C64::new(0.0, 0.0) {
                    continue;
                }
                let rrow = rhs.row(k);
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Row vector times matrix times conjugated row vector: `u A v^H`.
    pub fn sesquilinear(&self, u: &[C64], v: &[C64]) -> C64 {
        debug_assert!(self.is_square() && u.len() == self.rows && v.len() == self.cols);
        let mut acc = C64::new(0.0, 0.0);
        for (i, ui) in u.iter().enumerate() {
            let row = self.row(i);
            let mut s = C64::new(0.0, 0.0);
            for (a, vj) in row.iter().zip(v) {
                s += a * vj.conj();
            }
            acc += ui * s;
        }
        acc
    }
}

impl Index<(usize, usize)> for CMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &CMatrix {
    type Output = CMatrix;
    fn mul(self, rhs: &CMatrix) -> CMatrix {
        self.matmul(rhs).expect("matrix dimensions must agree")
    }
}

impl fmt::Debug for CMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "CMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for z in self.row(i) {
                write!(f, "{:>10.4}{:+.4}i ", z.re, z.im)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl std::ops::Add for &CMatrix {
    type Output = CMatrix;
    fn add(self, rhs: &CMatrix) -> CMatrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Lower-triangular Cholesky factor `T` with `T T^H = A`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: CMatrix,
}

impl Cholesky {
    /// Factors a Hermitian matrix without checking symmetry; only the lower
    /// triangle is read. Fails when a pivot is `<= min_pivot`.
    pub(crate) fn factor_unchecked(a: &CMatrix, min_pivot: f64) -> Result<Self, LinalgError> {
        let n = a.rows;
        let mut l = CMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d -= l[(j, k)].norm_sqr();
            }
            if !(d > min_pivot) {
                return Err(LinalgError::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l[(j, j)] = C64::new(djj, 0.0);
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s / djj;
            }
        }
        Ok(Cholesky { lower: l })
    }

    /// Checks Hermitian symmetry, symmetrizes, then factors.
    pub fn new(a: &CMatrix) -> Result<Self, LinalgError> {
        let dev = a.hermitian_deviation();
        if !(dev <= HERMITIAN_TOL) {
            return Err(LinalgError::NotHermitian { max_dev: dev });
        }
        Self::factor_unchecked(&a.symmetrized(), 0.0)
    }

    pub fn lower(&self) -> &CMatrix {
        &self.lower
    }

    pub fn into_lower(self) -> CMatrix {
        self.lower
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// Solves `T y = b` in place, column by column.
    pub fn solve_lower_in_place(&self, b: &mut CMatrix) {
        let n = self.dim();
        let l = &self.lower;
        for c in 0..b.cols {
            for i in 0..n {
                let mut s = b[(i, c)];
                for k in 0..i {
                    s -= l[(i, k)] * b[(k, c)];
                }
                b[(i, c)] = s / l[(i, i)];
            }
        }
    }

    /// Solves `T^H x = y` in place.
    pub fn solve_upper_in_place(&self, b: &mut CMatrix) {
        let n = self.dim();
        let l = &self.lower;
        for c in 0..b.cols {
            for i in (0..n).rev() {
                let mut s = b[(i, c)];
                for k in (i + 1)..n {
                    s -= l[(k, i)].conj() * b[(k, c)];
                }
                b[(i, c)] = s / l[(i, i)];
            }
        }
    }

    /// Solves `A x = b` for the factored `A`.
    pub fn solve(&self, b: &CMatrix) -> Result<CMatrix, LinalgError> {
        if b.rows != self.dim() {
            return Err(LinalgError::DimensionMismatch(format!(
                "system has {} rows, right-hand side has {}",
                self.dim(),
                b.rows
            )));
        }
        let mut x = b.clone();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        Ok(x)
    }

    /// Diagonal of `A^-1`.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.dim();
        let mut e = CMatrix::identity(n);
        self.solve_lower_in_place(&mut e);
        // diag(A^-1)_i = sum_k |(T^-1)_{k,i}|^2
        (0..n)
            .map(|i| (0..n).map(|k| e[(k, i)].norm_sqr()).sum())
            .collect()
    }
}

/// Conjugate transpose of `m`.
pub fn hermitian(m: &CMatrix) -> CMatrix {
    m.hermitian()
}

/// Lower-triangular `T` with `T T^H == sigma`.
pub fn cholesky_factor(sigma: &CMatrix) -> Result<CMatrix, LinalgError> {
    if !sigma.is_square() {
        return Err(LinalgError::DimensionMismatch(format!(
            "Cholesky needs a square matrix, got {}x{}",
            sigma.rows, sigma.cols
        )));
    }
    Cholesky::new(sigma).map(Cholesky::into_lower)
}

/// Solves `a x = b` for Hermitian positive-definite `a`.
pub fn hermitian_solve(a: &CMatrix, b: &CMatrix) -> Result<CMatrix, LinalgError> {
    if !a.is_square() || a.rows != b.rows {
        return Err(LinalgError::DimensionMismatch(format!(
            "cannot solve {}x{} system with {}x{} right-hand side",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Cholesky::new(a)?.solve(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn hermitian_of_identity_and_scalar() {
        assert_eq!(CMatrix::identity(3).hermitian(), CMatrix::identity(3));
        let m = CMatrix::from_vec(1, 1, vec![c(0.0, 1.0)]).unwrap();
        assert_eq!(m.hermitian()[(0, 0)], c(0.0, -1.0));
    }

    #[test]
    fn hermitian_is_involution() {
        let m = CMatrix::from_fn(2, 3, |i, j| c(i as f64 + 0.5, j as f64 - 1.25));
        let h = m.hermitian();
        assert_eq!((h.rows(), h.cols()), (3, 2));
        assert_eq!(h.hermitian(), m);
    }

    #[test]
    fn cholesky_identity() {
        let t = cholesky_factor(&CMatrix::identity(4)).unwrap();
        assert_eq!(t, CMatrix::identity(4));
    }

    #[test]
    fn cholesky_two_by_two() {
        let s = CMatrix::from_real(2, 2, &[1.0, 0.2, 0.2, 1.0]).unwrap();
        let t = cholesky_factor(&s).unwrap();
        let expected = CMatrix::from_real(2, 2, &[1.0, 0.0, 0.2, 0.96f64.sqrt()]).unwrap();
        assert!(t.max_abs_diff(&expected) < 1e-15);
        let back = &t * &t.hermitian();
        assert!(back.max_abs_diff(&s) < 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = CMatrix::from_real(2, 2, &[1.0, 1.1, 1.1, 1.0]).unwrap();
        assert!(matches!(
            cholesky_factor(&s),
            Err(LinalgError::NotPositiveDefinite { index: 1, .. })
        ));
    }

    #[test]
    fn cholesky_rejects_non_hermitian() {
        let s = CMatrix::from_real(2, 2, &[1.0, 0.3, 0.2, 1.0]).unwrap();
        assert!(matches!(
            cholesky_factor(&s),
            Err(LinalgError::NotHermitian { .. })
        ));
    }

    #[test]
    fn cholesky_tolerates_roundoff_asymmetry() {
        let mut s = CMatrix::from_real(2, 2, &[2.0, 0.5, 0.5, 2.0]).unwrap();
        s[(0, 1)] += c(1e-14, 0.0);
        assert!(cholesky_factor(&s).is_ok());
    }

    #[test]
    fn solve_identity_and_scaled_identity() {
        let b = CMatrix::from_fn(3, 2, |i, j| c(i as f64, -(j as f64) + 0.5));
        let x = hermitian_solve(&CMatrix::identity(3), &b).unwrap();
        assert!(x.max_abs_diff(&b) < 1e-15);
        let x = hermitian_solve(&CMatrix::identity(3).scale(2.0), &b).unwrap();
        assert!(x.max_abs_diff(&b.scale(0.5)) < 1e-15);
    }

    #[test]
    fn solve_dimension_mismatch() {
        let b = CMatrix::zeros(2, 1);
        assert!(matches!(
            hermitian_solve(&CMatrix::identity(3), &b),
            Err(LinalgError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn complex_hermitian_solve_residual() {
        // A = B B^H + I with a fixed complex B
        let bm = CMatrix::from_fn(4, 4, |i, j| {
            c(((i * 7 + j * 3) % 5) as f64 - 2.0, ((i + 2 * j) % 3) as f64 - 1.0)
        });
        let a = &(&bm * &bm.hermitian()) + &CMatrix::identity(4);
        let rhs = CMatrix::from_fn(4, 2, |i, j| c(i as f64 - 1.0, j as f64 + 0.5));
        let x = hermitian_solve(&a, &rhs).unwrap();
        let resid = (&a * &x).max_abs_diff(&rhs);
        assert!(resid / rhs.frobenius_norm() < 1e-12);
    }

    #[test]
    fn inverse_diagonal_matches_solve() {
        let a = CMatrix::from_real(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]).unwrap();
        let chol = Cholesky::new(&a).unwrap();
        let inv = chol.solve(&CMatrix::identity(3)).unwrap();
        for (i, d) in chol.inverse_diagonal().into_iter().enumerate() {
            assert!((d - inv[(i, i)].re).abs() < 1e-14);
        }
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            CMatrix::from_real(1, 2, &[1.0, f64::NAN]),
            Err(LinalgError::NonFinite(0, 1))
        ));
    }
}

