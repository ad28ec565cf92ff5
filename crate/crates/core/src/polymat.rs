//! Real polynomial matrices in the shift/derivative operator `q`.
//!
//! A [`PolyMatrix`] of degree `d` stores `[H0, H1, ..., Hd]` where `Hi`
//! multiplies `q^i`. Everything here is plain floating point; rank
//! decisions use a relative singular value threshold.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Relative singular value threshold for rank and null-space decisions.
pub const TOL_RANK: f64 = 1e-9;
/// Residual threshold used to accept a candidate left inverse.
pub const TOL_SOLVE: f64 = 1e-8;
/// Relative magnitude below which trailing coefficients are dropped.
const TRIM_REL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolyMatrixRepr", into = "PolyMatrixRepr")]
pub struct PolyMatrix {
    rows: usize,
    cols: usize,
    coeffs: Vec<DMatrix<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PolyMatrixRepr {
    rows: usize,
    cols: usize,
    coeffs: Vec<Vec<Vec<f64>>>,
}

impl TryFrom<PolyMatrixRepr> for PolyMatrix {
    type Error = Error;

    fn try_from(r: PolyMatrixRepr) -> Result<Self> {
        let mut coeffs = Vec::with_capacity(r.coeffs.len());
        for (k, m) in r.coeffs.iter().enumerate() {
            if m.len() != r.rows || m.iter().any(|row| row.len() != r.cols) {
                return Err(Error::DimensionMismatch(format!(
                    "coefficient {k} is not {}x{}",
                    r.rows, r.cols
                )));
            }
            coeffs.push(DMatrix::from_fn(r.rows, r.cols, |i, j| m[i][j]));
        }
        PolyMatrix::new(r.rows, r.cols, coeffs)
    }
}

impl From<PolyMatrix> for PolyMatrixRepr {
    fn from(p: PolyMatrix) -> Self {
        PolyMatrixRepr {
            rows: p.rows,
            cols: p.cols,
            coeffs: p
                .coeffs
                .iter()
                .map(|m| (0..p.rows).map(|i| m.row(i).iter().copied().collect()).collect())
                .collect(),
        }
    }
}

impl PolyMatrix {
    /// Builds a polynomial matrix from ascending coefficients and
    /// canonicalizes it.
    pub fn new(rows: usize, cols: usize, coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        if coeffs.iter().any(|c| c.shape() != (rows, cols)) {
            return Err(Error::DimensionMismatch(format!(
                "all coefficients must be {rows}x{cols}"
            )));
        }
        let mut p = PolyMatrix { rows, cols, coeffs };
        p.canonicalize();
        Ok(p)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        PolyMatrix {
            rows,
            cols,
            coeffs: vec![DMatrix::zeros(rows, cols)],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        PolyMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            coeffs: vec![m],
        }
    }

    /// `m * q^k`.
    pub fn monomial(m: DMatrix<f64>, k: usize) -> Self {
        let (r, c) = m.shape();
        let mut coeffs = vec![DMatrix::zeros(r, c); k];
        coeffs.push(m);
        Self::new(r, c, coeffs).expect("shapes agree")
    }

    /// Scalar polynomial from ascending coefficients.
    pub fn scalar(coeffs: &[f64]) -> Self {
        let c = if coeffs.is_empty() { vec![0.0] } else { coeffs.to_vec() };
        Self::new(1, 1, c.iter().map(|&x| DMatrix::from_element(1, 1, x)).collect()).expect("1x1")
    }

    /// Row polynomial `[p_1(q) ... p_n(q)]` from per-entry ascending coefficients.
    pub fn row_from_entries(entries: &[Vec<f64>]) -> Self {
        let cols = entries.len();
        let len = entries.iter().map(|e| e.len()).max().unwrap_or(1).max(1);
        let coeffs = (0..len)
            .map(|k| DMatrix::from_fn(1, cols, |_, j| entries[j].get(k).copied().unwrap_or(0.0)))
            .collect();
        Self::new(1, cols, coeffs).expect("shapes agree")
    }

    /// Splits a block-row matrix `[H0 ... Hd]` back into a polynomial matrix.
    pub fn from_blkrow(rows: usize, cols: usize, m: &DMatrix<f64>) -> Result<Self> {
        if m.nrows() != rows || cols == 0 || !m.ncols().is_multiple_of(cols) {
            return Err(Error::DimensionMismatch(format!(
                "block row of shape {:?} cannot hold {rows}x{cols} blocks",
                m.shape()
            )));
        }
        let n = (m.ncols() / cols).max(1);
        let coeffs = (0..n)
            .map(|k| m.view((0, k * cols), (rows, cols)).into_owned())
            .collect();
        Self::new(rows, cols, coeffs)
    }

    fn canonicalize(&mut self) {
        if self.coeffs.is_empty() {
            self.coeffs.push(DMatrix::zeros(self.rows, self.cols));
        }
        let scale = self.max_abs();
        let cut = TRIM_REL * scale;
        while self.coeffs.len() > 1 {
            let last = self.coeffs.last().unwrap();
            if last.iter().all(|x| x.abs() <= cut) {
                self.coeffs.pop();
            } else {
                break;
            }
        }
        if scale == 0.0 {
            self.coeffs.truncate(1);
        }
    }

    fn max_abs(&self) -> f64 {
        self.coeffs
            .iter()
            .flat_map(|c| c.iter())
            .fold(0.0_f64, |a, &x| a.max(x.abs()))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn coeffs(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    /// Coefficient of `q^k`; zero beyond the degree.
    pub fn coeff(&self, k: usize) -> DMatrix<f64> {
        self.coeffs
            .get(k)
            .cloned()
            .unwrap_or_else(|| DMatrix::zeros(self.rows, self.cols))
    }

    pub fn is_zero(&self) -> bool {
        self.max_abs() == 0.0
    }

    /// Ascending coefficients of the scalar entry `(i, j)`, trimmed.
    pub fn entry(&self, i: usize, j: usize) -> Vec<f64> {
        let mut v: Vec<f64> = self.coeffs.iter().map(|c| c[(i, j)]).collect();
        let scale = self.max_abs();
        while v.len() > 1 && v.last().unwrap().abs() <= TRIM_REL * scale {
            v.pop();
        }
        v
    }

    /// Degree of a single row (largest power with a nonzero entry in it).
    pub fn row_degree(&self, i: usize) -> usize {
        let cut = TRIM_REL * self.max_abs();
        (0..self.coeffs.len())
            .rev()
            .find(|&k| self.coeffs[k].row(i).iter().any(|x| x.abs() > cut))
            .unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> PolyMatrix {
        let coeffs = self.coeffs.iter().map(|c| c.rows(i, 1).into_owned()).collect();
        Self::new(1, self.cols, coeffs).expect("shapes agree")
    }

    pub fn columns(&self, start: usize, n: usize) -> PolyMatrix {
        let coeffs = self.coeffs.iter().map(|c| c.columns(start, n).into_owned()).collect();
        Self::new(self.rows, n, coeffs).expect("shapes agree")
    }

    /// `[H0 H1 ... Hd]`.
    pub fn blkrow(&self) -> DMatrix<f64> {
        let refs: Vec<&DMatrix<f64>> = self.coeffs.iter().collect();
        linalg::hcat(&refs)
    }

    /// Banded block-Toeplitz form with `block_rows` block rows.
    pub fn toeplitz(&self, block_rows: usize) -> DMatrix<f64> {
        let d = self.degree();
        let (r, c) = (self.rows, self.cols);
        let mut t = DMatrix::zeros(block_rows * r, (block_rows + d) * c);
        for k in 0..block_rows {
            for (i, h) in self.coeffs.iter().enumerate() {
                t.view_mut((k * r, (k + i) * c), (r, c)).copy_from(h);
            }
        }
        t
    }

    pub fn mul(&self, other: &PolyMatrix) -> Result<PolyMatrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = self.coeffs.len() + other.coeffs.len() - 1;
        let mut out = vec![DMatrix::zeros(self.rows, other.cols); n];
        for (i, a) in self.coeffs.iter().enumerate() {
            for (j, b) in other.coeffs.iter().enumerate() {
                out[i + j] += a * b;
            }
        }
        Self::new(self.rows, other.cols, out)
    }

    pub fn add(&self, other: &PolyMatrix) -> Result<PolyMatrix> {
        self.axpy(1.0, other)
    }

    pub fn sub(&self, other: &PolyMatrix) -> Result<PolyMatrix> {
        self.axpy(-1.0, other)
    }

    /// `self + alpha * other`.
    pub fn axpy(&self, alpha: f64, other: &PolyMatrix) -> Result<PolyMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "cannot add {}x{} and {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let n = self.coeffs.len().max(other.coeffs.len());
        let coeffs = (0..n).map(|k| self.coeff(k) + other.coeff(k) * alpha).collect();
        Self::new(self.rows, self.cols, coeffs)
    }

    pub fn scale(&self, alpha: f64) -> PolyMatrix {
        let coeffs = self.coeffs.iter().map(|c| c * alpha).collect();
        Self::new(self.rows, self.cols, coeffs).expect("shapes agree")
    }

    /// Assembles a block matrix from a grid of polynomial matrices.
    pub fn block(grid: &[Vec<&PolyMatrix>]) -> Result<PolyMatrix> {
        let heights: Vec<usize> = grid.iter().map(|r| r[0].rows).collect();
        let widths: Vec<usize> = grid[0].iter().map(|p| p.cols).collect();
        let deg = grid
            .iter()
            .flat_map(|r| r.iter())
            .map(|p| p.degree())
            .max()
            .unwrap_or(0);
        let (tr, tc): (usize, usize) = (heights.iter().sum(), widths.iter().sum());
        let mut coeffs = vec![DMatrix::zeros(tr, tc); deg + 1];
        let mut r0 = 0;
        for (bi, row) in grid.iter().enumerate() {
            if row.len() != widths.len() {
                return Err(Error::DimensionMismatch("ragged block grid".into()));
            }
            let mut c0 = 0;
            for (bj, p) in row.iter().enumerate() {
                if p.rows != heights[bi] || p.cols != widths[bj] {
                    return Err(Error::DimensionMismatch(format!(
                        "block ({bi},{bj}) is {}x{}, expected {}x{}",
                        p.rows, p.cols, heights[bi], widths[bj]
                    )));
                }
                for (k, h) in p.coeffs.iter().enumerate() {
                    coeffs[k].view_mut((r0, c0), (p.rows, p.cols)).copy_from(h);
                }
                c0 += p.cols;
            }
            r0 += heights[bi];
        }
        Self::new(tr, tc, coeffs)
    }

    /// `sum_i Hi z^i` by Horner's scheme.
    pub fn eval(&self, z: Complex64) -> DMatrix<Complex64> {
        let mut acc = DMatrix::<Complex64>::zeros(self.rows, self.cols);
        for c in self.coeffs.iter().rev() {
            acc = acc * z + c.map(|x| Complex64::new(x, 0.0));
        }
        acc
    }

    /// Minimum-degree polynomial left inverse with the default tolerances.
    pub fn left_inverse(&self, k_max: usize) -> Result<PolyMatrix> {
        self.left_inverse_tol(k_max, TOL_SOLVE, TOL_RANK)
    }

    /// Searches `k = 0..=k_max` for `X` with `blkrow(X) * toeplitz(H, k+1) = [I 0 ... 0]`,
    /// taking the minimum-norm least-squares solution at each degree.
    pub fn left_inverse_tol(&self, k_max: usize, tol_solve: f64, tol_rank: f64) -> Result<PolyMatrix> {
        if self.rows < self.cols {
            return Err(Error::DimensionMismatch(format!(
                "left inverse needs rows >= cols, got {}x{}",
                self.rows, self.cols
            )));
        }
        let mut best = f64::INFINITY;
        for k in 0..=k_max {
            let t = self.toeplitz(k + 1);
            let mut rhs = DMatrix::zeros(self.cols, t.ncols());
            rhs.view_mut((0, 0), (self.cols, self.cols)).fill_with_identity();
            let x: DMatrix<f64> = &rhs * linalg::pinv(&t, tol_rank);
            let res = (&x * &t - &rhs).norm();
            best = best.min(res);
            if res < tol_solve {
                return Self::from_blkrow(self.cols, self.rows, &x);
            }
        }
        Err(Error::NoLeftInverse {
            k_max,
            best_residual: best,
        })
    }

    /// Orthonormal rows spanning the left null space of `toeplitz(H, k+1)`.
    pub fn left_null_space(&self, k: usize, tol_rank: f64) -> DMatrix<f64> {
        linalg::left_null_rows(&self.toeplitz(k + 1), tol_rank)
    }

    /// True iff some constant `v != 0` has `v' P(q) = 0`.
    pub fn has_nonzero_left_annihilator(&self, tol_rank: f64) -> bool {
        linalg::rank(&self.blkrow(), tol_rank) < self.rows
    }
}
