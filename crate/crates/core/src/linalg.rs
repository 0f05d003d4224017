//! Dense row-major matrices and the handful of norms the bounds need.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. Matrix products are delegated to
//! `matrixmultiply`, which handles arbitrary strides so transposed operands
//! never have to be materialized.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Seeded, platform-independent generator. Identical seeds give identical streams.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries((0..self.rows).map(|r| self.row(r)))
            .finish()
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim(
                "Matrix::from_vec",
                format!("{} entries", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix from nested rows. An empty outer list gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Single-column matrix.
    pub fn column(v: &[f64]) -> Self {
        Matrix {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    /// Single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact panics on a zero chunk size
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn abs(&self) -> Matrix {
        self.map(f64::abs)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|x| c * x)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "Matrix::add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise maximum of absolute values.
    pub fn max_abs(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "Matrix::max_abs")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.abs().max(b.abs()))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|x| x.abs()).sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_entry(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Adds `v` to every row.
    pub fn add_row_broadcast(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.cols {
            return Err(Error::dim("Matrix::add_row_broadcast", self.cols, v.len()));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(v) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Sum over rows, one entry per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (acc, x) in s.iter_mut().zip(r) {
                *acc += x;
            }
        }
        s
    }

    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::dim(
                "matmul",
                format!("{} rows in rhs", self.cols),
                b.rows,
            ));
        }
        let mut c = Matrix::zeros(self.rows, b.cols);
        gemm(1.0, self, false, b, false, 0.0, &mut c);
        Ok(c)
    }

    /// `self * bᵀ`.
    pub fn matmul_nt(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.cols {
            return Err(Error::dim(
                "matmul_nt",
                format!("{} columns in rhs", self.cols),
                b.cols,
            ));
        }
        let mut c = Matrix::zeros(self.rows, b.rows);
        gemm(1.0, self, false, b, true, 0.0, &mut c);
        Ok(c)
    }

    /// `selfᵀ * b`.
    pub fn matmul_tn(&self, b: &Matrix) -> Result<Matrix> {
        if self.rows != b.rows {
            return Err(Error::dim(
                "matmul_tn",
                format!("{} rows in rhs", self.rows),
                b.rows,
            ));
        }
        let mut c = Matrix::zeros(self.cols, b.cols);
        gemm(1.0, self, true, b, false, 0.0, &mut c);
        Ok(c)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::dim("matvec", self.cols, x.len()));
        }
        Ok(self.row_iter().map(|r| dot(r, x)).collect())
    }

    /// `selfᵀ * y`.
    pub fn transpose_matvec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::dim("transpose_matvec", self.rows, y.len()));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in self.row_iter().zip(y) {
            if yr != 0.0 {
                axpy(yr, r, &mut out);
            }
        }
        Ok(out)
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                op,
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

impl From<Matrix> for Vec<Vec<f64>> {
    fn from(m: Matrix) -> Self {
        m.row_iter().map(<[f64]>::to_vec).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Matrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        Matrix::from_rows(&rows)
    }
}

/// `c ← alpha·op(a)·op(b) + beta·c`. Shapes are the caller's responsibility.
pub(crate) fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let n = if trans_b { b.rows } else { b.cols };
    debug_assert_eq!(c.shape(), (m, n));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c.data.iter_mut() {
            *x *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the pointers cover exactly the (m,k), (k,n) and (m,n) strided
    // views described by the stride arguments, all inside their buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn l1_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Sign with `sign(0) = 0`.
pub fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Operator ∞-norm: the largest row L1 norm.
pub fn op_inf_norm(w: &Matrix) -> f64 {
    w.row_iter().map(l1_norm).fold(0.0, f64::max)
}

/// Value of the ∞→1 operator norm, or an upper bound on it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfOneNorm {
    pub value: f64,
    /// `false` when `value` is the entrywise absolute sum rather than the exact norm.
    pub exact: bool,
}

pub const DEFAULT_EXACT_DIM_LIMIT: usize = 16;

/// `sup_{‖t‖∞ ≤ 1} ‖W t‖₁`.
///
/// The supremum of a convex function over the cube is attained at a vertex,
/// so up to `exact_dim_limit` columns the sign vectors are enumerated
/// exhaustively (Gray-code order, one column update per vertex, and only half
/// the cube since `t` and `-t` give the same value). Wider matrices fall back
/// to `1ᵀ|W|1`.
pub fn op_inf_one_norm(w: &Matrix, exact_dim_limit: usize) -> InfOneNorm {
    let n = w.cols();
    if n > exact_dim_limit || n >= usize::BITS as usize - 1 {
        return InfOneNorm {
            value: w.abs_sum(),
            exact: false,
        };
    }
    if n == 0 || w.rows() == 0 {
        return InfOneNorm {
            value: 0.0,
            exact: true,
        };
    }
    // start at t = (1, ..., 1); keep the last sign fixed to halve the work
    let mut signs = vec![1.0; n];
    let mut wt: Vec<f64> = w.row_iter().map(|r| r.iter().sum()).collect();
    let mut best = l1_norm(&wt);
    let free = n - 1;
    for step in 1u64..(1u64 << free) {
        let j = step.trailing_zeros() as usize;
        signs[j] = -signs[j];
        let delta = 2.0 * signs[j];
        for (acc, r) in wt.iter_mut().zip(w.row_iter()) {
            *acc += delta * r[j];
        }
        best = best.max(l1_norm(&wt));
    }
    InfOneNorm {
        value: best,
        exact: true,
    }
}

/// Orthogonal initialization from a seeded Gaussian matrix.
///
/// For `rows <= cols` the rows of the result are orthonormal. Otherwise a
/// `cols x rows` Gaussian matrix is row-orthonormalized and transposed, so
/// the columns are orthonormal.
pub fn orthogonal_init(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    assert!(
        rows >= 1 && cols >= 1,
        "orthogonal_init needs a nonempty shape"
    );
    let (r, c) = if rows <= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    let mut m = Matrix::zeros(r, c);
    for x in m.data.iter_mut() {
        *x = standard_normal(rng);
    }
    orthonormalize_rows(&mut m, rng);
    if rows <= cols {
        m
    } else {
        m.transpose()
    }
}

/// Modified Gram-Schmidt with one reorthogonalization pass. A row that
/// collapses numerically is redrawn.
fn orthonormalize_rows(m: &mut Matrix, rng: &mut Rng) {
    let c = m.cols;
    for i in 0..m.rows {
        loop {
            for _pass in 0..2 {
                for j in 0..i {
                    let (done, rest) = m.data.split_at_mut(i * c);
                    let prev = &done[j * c..(j + 1) * c];
                    let cur = &mut rest[..c];
                    let proj = dot(prev, cur);
                    axpy(-proj, prev, cur);
                }
            }
            let norm = l2_norm(m.row(i));
            if norm > 1e-8 {
                for x in m.row_mut(i) {
                    *x /= norm;
                }
                break;
            }
            for x in m.row_mut(i) {
                *x = standard_normal(rng);
            }
        }
    }
}
