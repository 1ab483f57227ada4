//! Dense row-major matrices and the small set of exact kernels the
//! recurrences are built from.
//!
//! Everything is 64-bit. Matrices stack per-token vectors as rows, so a
//! chunk of `C` keys is a `C x d_k` matrix and the recurrent state is a
//! `d_v x d_k` matrix.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;

use crate::error::{mismatch, Error, Result};

/// Per-token vectors (keys, queries, gates) are plain `Vec<f64>`.
pub type Vector = Vec<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(mismatch("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row vectors. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    pub fn set_rows(&mut self, start: usize, block: &Matrix) {
        assert_eq!(block.cols, self.cols);
        let off = start * self.cols;
        self.data[off..off + block.data.len()].copy_from_slice(&block.data);
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out);
        out
    }

    /// `self * other^T`
    pub fn matmul_nt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_nt inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out);
        out
    }

    /// `self^T * other`
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out);
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vector {
        assert_eq!(self.cols, x.len(), "matvec dimension");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T x`
    pub fn matvec_t(&self, x: &[f64]) -> Vector {
        assert_eq!(self.rows, x.len(), "matvec_t dimension");
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            axpy(*xi, self.row(i), &mut out);
        }
        out
    }

    /// `self += alpha * u v^T`
    pub fn rank1_update(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows);
        assert_eq!(v.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            let c = alpha * ui;
            if c != 0.0 {
                axpy(c, v, self.row_mut(i));
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(alpha);
        m
    }

    /// Multiplies column `j` by `d[j]`, i.e. `self * diag(d)`.
    pub fn scale_cols(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.cols);
        for i in 0..self.rows {
            for (x, s) in self.row_mut(i).iter_mut().zip(d) {
                *x *= s;
            }
        }
    }

    /// Multiplies row `i` by `d[i]`, i.e. `diag(d) * self`.
    pub fn scale_rows(&mut self, d: &[f64]) {
        assert_eq!(d.len(), self.rows);
        for (i, s) in d.iter().enumerate() {
            self.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
    }

    pub fn sub_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a -= b);
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        axpy(alpha, &other.data, &mut self.data);
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        let mut m = self.clone();
        m.sub_assign(other);
        m
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        let mut m = self.clone();
        m.add_assign(other);
        m
    }

    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| f(*x)).collect(),
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        max_abs_diff(&self.data, &other.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm(alpha: f64, a: &Matrix, ta: bool, b: &Matrix, tb: bool, beta: f64, c: &mut Matrix) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: strides and extents are derived from the owning matrices and
    // checked against each other above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Inner product with four independent partial sums, so the loop is not
/// bound by floating-point add latency.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn normalize(x: &[f64]) -> Vector {
    let n = norm(x);
    if n == 0.0 {
        x.to_vec()
    } else {
        x.iter().map(|v| v / n).collect()
    }
}

pub fn outer(u: &[f64], v: &[f64]) -> Matrix {
    Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Solves `L X = B` by forward substitution for unit lower-triangular `L`.
pub fn solve_unit_lower_triangular(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    if l.cols() != n {
        return Err(mismatch("solve_unit_lower_triangular (L square)", n, l.cols()));
    }
    if b.rows() != n {
        return Err(mismatch("solve_unit_lower_triangular (rows of B)", n, b.rows()));
    }
    l.check_finite("triangular factor")?;
    b.check_finite("right-hand side")?;
    for i in 0..n {
        if l[(i, i)] != 1.0 {
            return Err(Error::NotUnitLowerTriangular(format!("diagonal entry {i} is {}", l[(i, i)])));
        }
        if let Some(j) = (i + 1..n).find(|&j| l[(i, j)] != 0.0) {
            return Err(Error::NotUnitLowerTriangular(format!("entry ({i}, {j}) above the diagonal")));
        }
    }

    let mut x = b.clone();
    let m = b.cols();
    let mut acc = vec![0.0; m];
    for i in 1..n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for j in 0..i {
            let lij = l[(i, j)];
            if lij != 0.0 {
                axpy(lij, x.row(j), &mut acc);
            }
        }
        for (xi, a) in x.row_mut(i).iter_mut().zip(&acc) {
            *xi -= a;
        }
    }
    Ok(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixMode {
    /// `out[j] = prod(values[0..=j])`
    Inclusive,
    /// `out[j] = prod(values[0..j])`, with the empty product equal to 1
    Exclusive,
}

/// Running products of strictly positive values (decay gates).
pub fn prefix_products(values: &[f64], mode: PrefixMode) -> Result<Vector> {
    if let Some(v) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(Error::NonPositive(format!("prefix_products input {v}")));
    }
    let mut acc = 1.0;
    Ok(values
        .iter()
        .map(|v| match mode {
            PrefixMode::Inclusive => {
                acc *= v;
                acc
            }
            PrefixMode::Exclusive => {
                let out = acc;
                acc *= v;
                out
            }
        })
        .collect())
}

/// Column-wise running products down the rows of `values`.
pub fn prefix_products_rows(values: &Matrix, mode: PrefixMode) -> Result<Matrix> {
    let mut out = Matrix::zeros(values.rows(), values.cols());
    for j in 0..values.cols() {
        let col: Vec<f64> = (0..values.rows()).map(|i| values[(i, j)]).collect();
        for (i, p) in prefix_products(&col, mode)?.into_iter().enumerate() {
            out[(i, j)] = p;
        }
    }
    Ok(out)
}

/// Dense factorizations used by the oracles. Backed by nalgebra.
pub mod dense {
    use super::Matrix;
    use crate::error::{Error, Result};

    pub fn inverse(m: &Matrix) -> Result<Matrix> {
        m.to_nalgebra()
            .try_inverse()
            .map(|inv| Matrix::from_nalgebra(&inv))
            .ok_or_else(|| Error::Singular("dense inverse".into()))
    }

    /// Solves `A X = B` by partial-pivot LU.
    pub fn solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        a.to_nalgebra()
            .lu()
            .solve(&b.to_nalgebra())
            .map(|x| Matrix::from_nalgebra(&x))
            .ok_or_else(|| Error::Singular("LU solve".into()))
    }

    pub fn determinant(m: &Matrix) -> f64 {
        m.to_nalgebra().lu().determinant()
    }

    /// Solves `X A = B` for symmetric positive definite `A` (right division).
    pub fn solve_spd_right(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        let chol = a
            .to_nalgebra()
            .cholesky()
            .ok_or_else(|| Error::Singular("Gram matrix is not positive definite".into()))?;
        // X A = B  <=>  A X^T = B^T
        let xt = chol.solve(&b.to_nalgebra().transpose());
        Ok(Matrix::from_nalgebra(&xt.transpose()))
    }

    const SCHUR_MAX_ITERS: usize = 100_000;
    // machine epsilon stalls on eigenvalues of high multiplicity
    const SCHUR_EPS: f64 = 1e-14;

    fn complex_eigenvalues(m: &Matrix) -> Result<Vec<nalgebra::Complex<f64>>> {
        if m.rows() == 0 {
            return Ok(Vec::new());
        }
        // the Schur iteration never converges on the zero matrix
        if m.max_abs() == 0.0 {
            return Ok(vec![nalgebra::Complex::new(0.0, 0.0); m.rows()]);
        }
        let schur = nalgebra::linalg::Schur::try_new(m.to_nalgebra(), SCHUR_EPS, SCHUR_MAX_ITERS)
            .ok_or_else(|| Error::Singular("Schur iteration did not converge".into()))?;
        Ok(schur.complex_eigenvalues().iter().copied().collect())
    }

    /// Eigenvalue moduli of a general real square matrix.
    pub fn eigenvalue_moduli(m: &Matrix) -> Result<Vec<f64>> {
        Ok(complex_eigenvalues(m)?.iter().map(|z| z.norm()).collect())
    }

    /// Real parts of the eigenvalues of a general real square matrix.
    pub fn eigenvalues_real(m: &Matrix) -> Result<Vec<f64>> {
        Ok(complex_eigenvalues(m)?.iter().map(|z| z.re).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_solve_returns_rhs() {
        let b = Matrix::from_rows(&[[1.0, -2.0], [3.5, 0.0], [7.0, 1.0]]);
        let x = solve_unit_lower_triangular(&Matrix::identity(3), &b).unwrap();
        assert_eq!(x, b);
    }

    #[test]
    fn two_by_two_solve() {
        // dense inverse of [[1,0],[0.5,1]] is [[1,0],[-0.5,1]]; applied to [2,3] gives [2,2]
        let l = Matrix::from_rows(&[[1.0, 0.0], [0.5, 1.0]]);
        let b = Matrix::from_rows(&[[2.0], [3.0]]);
        let x = solve_unit_lower_triangular(&l, &b).unwrap();
        assert_eq!(x, Matrix::from_rows(&[[2.0], [2.0]]));
        let dense = dense::inverse(&l).unwrap().matmul(&b);
        assert!(x.max_abs_diff(&dense) < 1e-15);
    }

    #[test]
    fn strict_lower_ones() {
        let l = Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]);
        let b = Matrix::from_rows(&[[1.0], [1.0]]);
        let x = solve_unit_lower_triangular(&l, &b).unwrap();
        assert_eq!(x, Matrix::from_rows(&[[1.0], [0.0]]));
    }

    #[test]
    fn solve_rejects_bad_input() {
        let l = Matrix::from_rows(&[[2.0, 0.0], [1.0, 1.0]]);
        let b = Matrix::zeros(2, 1);
        assert!(matches!(
            solve_unit_lower_triangular(&l, &b),
            Err(Error::NotUnitLowerTriangular(_))
        ));
        let upper = Matrix::from_rows(&[[1.0, 0.3], [0.0, 1.0]]);
        assert!(solve_unit_lower_triangular(&upper, &b).is_err());
        assert!(matches!(
            solve_unit_lower_triangular(&Matrix::identity(3), &b),
            Err(Error::DimensionMismatch { .. })
        ));
        let nan = Matrix::from_rows(&[[f64::NAN], [0.0]]);
        assert!(matches!(
            solve_unit_lower_triangular(&Matrix::identity(2), &nan),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn prefix_product_examples() {
        assert_eq!(
            prefix_products(&[1.0, 1.0, 1.0], PrefixMode::Inclusive).unwrap(),
            vec![1.0, 1.0, 1.0]
        );
        assert_eq!(
            prefix_products(&[0.5, 0.5], PrefixMode::Inclusive).unwrap(),
            vec![0.5, 0.25]
        );
        assert_eq!(prefix_products(&[0.9], PrefixMode::Exclusive).unwrap(), vec![1.0]);
        assert!(prefix_products(&[0.5, 0.0], PrefixMode::Inclusive).is_err());
        assert!(prefix_products(&[-0.5], PrefixMode::Exclusive).is_err());
    }

    #[test]
    fn prefix_rows_match_columns() {
        let v = Matrix::from_rows(&[[0.5, 1.0], [0.5, 0.25]]);
        let p = prefix_products_rows(&v, PrefixMode::Inclusive).unwrap();
        assert_eq!(p, Matrix::from_rows(&[[0.5, 1.0], [0.25, 0.25]]));
    }

    #[test]
    fn gemm_transposes() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        let b = Matrix::from_rows(&[[1.0, 0.0, -1.0], [2.0, 1.0, 0.5]]);
        let nt = a.matmul_nt(&b);
        assert_eq!(nt, a.matmul(&b.transpose()));
        let tn = a.matmul_tn(&b);
        assert_eq!(tn, a.transpose().matmul(&b));
    }

    fn unit_lower(n: usize, entries: &[f64]) -> Matrix {
        let mut l = Matrix::identity(n);
        let mut it = entries.iter();
        for i in 0..n {
            for j in 0..i {
                l[(i, j)] = *it.next().unwrap();
            }
        }
        l
    }

    proptest! {
        #[test]
        fn solve_recovers_x(n in 1usize..12, m in 1usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let l = unit_lower(n, &entries);
            let x = Matrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
            let b = l.matmul(&x);
            let got = solve_unit_lower_triangular(&l, &b).unwrap();
            let rel = got.sub(&x).frobenius_norm() / x.frobenius_norm().max(1e-300);
            prop_assert!(rel < 1e-12, "relative error {rel}");
        }

        #[test]
        fn inclusive_is_exclusive_times_value(vals in proptest::collection::vec(0.01f64..1.0, 1..40)) {
            let inc = prefix_products(&vals, PrefixMode::Inclusive).unwrap();
            let exc = prefix_products(&vals, PrefixMode::Exclusive).unwrap();
            for j in 0..vals.len() {
                prop_assert!((inc[j] - exc[j] * vals[j]).abs() <= 1e-15 * inc[j].abs().max(1e-300));
            }
        }
    }
}
