//! Small dense linear algebra: a row-major matrix type, cyclic Jacobi
//! eigen-decomposition for symmetric matrices, Cholesky factorization and
//! 2-norm condition numbers of SPD matrices.
//!
//! Matrices handled here are small (1D element blocks of at most a dozen
//! rows) except for the per-element internal blocks used by static
//! condensation, which reach roughly a thousand rows at order 8. The
//! Cholesky routines are written for that second case: row-contiguous inner
//! products and row axpys, with products delegated to `matrixmultiply`.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Sweep cap for the cyclic Jacobi eigen-solver.
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius threshold, relative to `‖A‖_F`.
pub const JACOBI_OFF_TOL: f64 = 1e-14;
/// Cholesky pivot tolerance, relative to the largest diagonal entry.
pub const CHOLESKY_PIVOT_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinAlgError {
    #[error("matrix is not symmetric positive definite (pivot {pivot} = {value:e})")]
    NotSpd { pivot: usize, value: f64 },
    #[error("Jacobi eigen-solver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is singular (pivot column {0})")]
    Singular(usize),
    #[error("non-finite entry encountered")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, LinAlgError>;

/// Row-major dense matrix of `f64`.
#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            write!(f, "  ")?;
            for j in 0..self.cols {
                write!(f, "{:>13.6e} ", self[(i, j)])?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
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

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    /// Builds a matrix from row-major data. Panics if the length is wrong.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major data has wrong length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
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

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_square(&self) -> bool {
        self.rows == self.cols
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

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Symmetry check with `|A_ij − A_ji| ≤ rel_tol·max|A|`.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let tol = rel_tol * self.max_abs();
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s·other`.
    pub fn add_scaled(&mut self, s: f64, other: &DenseMatrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Extracts the submatrix with the given row and column index sets.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Self {
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(rows[i], cols[j])])
    }

    /// `self·other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut c = Self::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut c);
        c
    }

    /// `selfᵀ·other`.
    pub fn tr_matmul(&self, other: &DenseMatrix) -> Self {
        assert_eq!(self.rows, other.rows);
        let mut c = Self::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut c);
        c
    }

    /// `self·otherᵀ`.
    pub fn matmul_tr(&self, other: &DenseMatrix) -> Self {
        assert_eq!(self.cols, other.cols);
        let mut c = Self::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut c);
        c
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ·x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, x.len());
        let mut y = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                for (yj, a) in y.iter_mut().zip(self.row(i)) {
                    *yj += a * xi;
                }
            }
        }
        y
    }

    /// Replaces the matrix by its symmetric part `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        assert!(self.is_square());
        let n = self.rows;
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `C ← α·op(A)·op(B) + β·C` on row-major storage.
pub fn gemm(
    alpha: f64,
    a: &DenseMatrix,
    a_trans: bool,
    b: &DenseMatrix,
    b_trans: bool,
    beta: f64,
    c: &mut DenseMatrix,
) {
    let (m, k, rsa, csa) = if a_trans {
        (a.cols, a.rows, 1, a.cols)
    } else {
        (a.rows, a.cols, a.cols, 1)
    };
    let (kb, n, rsb, csb) = if b_trans {
        (b.cols, b.rows, 1, b.cols)
    } else {
        (b.rows, b.cols, b.cols, 1)
    };
    assert_eq!(k, kb, "gemm inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output has wrong shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale(beta);
        return;
    }
    // SAFETY: all strides and extents are derived from the matrices' own
    // shapes, which were checked above.
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

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, in the order of `values`.
    pub vectors: DenseMatrix,
}

fn off_diagonal_norm(a: &DenseMatrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[(i, j)] * a[(i, j)];
            }
        }
    }
    s.sqrt()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
///
/// Rotations are applied to every off-diagonal entry that is not negligible
/// relative to its two diagonal entries, so small eigenvalues of graded
/// matrices keep full relative accuracy. A sweep without rotations ends the
/// iteration; reaching the sweep cap is only an error when the off-diagonal
/// norm is still above `1e-14·‖A‖_F`.
pub fn sym_eig(a: &DenseMatrix) -> Result<SymEigen> {
    if !a.is_square() {
        return Err(LinAlgError::DimensionMismatch(format!(
            "sym_eig needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if !a.is_finite() {
        return Err(LinAlgError::NonFinite);
    }
    let n = a.rows;
    let mut w = a.clone();
    w.symmetrize();
    let mut v = DenseMatrix::identity(n);
    if n <= 1 {
        return Ok(SymEigen {
            values: w.diagonal(),
            vectors: v,
        });
    }
    let norm = w.frobenius_norm();
    let off_tol = JACOBI_OFF_TOL * norm;
    let mut sweeps = 0;
    loop {
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = w[(p, q)];
                let app = w[(p, p)];
                let aqq = w[(q, q)];
                if apq == 0.0 || apq.abs() <= f64::EPSILON * 0.5 * (app.abs() * aqq.abs()).sqrt()
                {
                    continue;
                }
                rotated = true;
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q.
                for k in 0..n {
                    let akp = w[(k, p)];
                    let akq = w[(k, q)];
                    w[(k, p)] = c * akp - s * akq;
                    w[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[(p, k)];
                    let aqk = w[(q, k)];
                    w[(p, k)] = c * apk - s * aqk;
                    w[(q, k)] = s * apk + c * aqk;
                }
                w[(p, q)] = 0.0;
                w[(q, p)] = 0.0;
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        sweeps += 1;
        if !rotated {
            break;
        }
        if sweeps >= JACOBI_MAX_SWEEPS {
            let off = off_diagonal_norm(&w);
            if off <= off_tol {
                break;
            }
            return Err(LinAlgError::NoConvergence {
                sweeps,
                off_norm: off,
            });
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[(i, i)].total_cmp(&w[(j, j)]));
    let values = order.iter().map(|&i| w[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        // Fix the sign so the largest component is positive.
        let mut big = 0;
        for k in 0..n {
            if v[(k, old_j)].abs() > v[(big, old_j)].abs() {
                big = k;
            }
        }
        let sign = if v[(big, old_j)] < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors[(k, new_j)] = sign * v[(k, old_j)];
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Lower-triangular Cholesky factor `A = L·Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: DenseMatrix,
}

/// Panel width of the blocked factorization and triangular solves.
const CHOLESKY_BLOCK: usize = 64;

/// `C ← α·A·B + β·C` on strided sub-views of row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm_view(
    (m, k, n): (usize, usize, usize),
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    rsc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= (m - 1) * rsc + n);
    // SAFETY: the asserts above bound every accessed element.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            1,
        );
    }
}

impl Cholesky {
    pub fn factor(a: &DenseMatrix) -> Result<Self> {
        if !a.is_square() {
            return Err(LinAlgError::DimensionMismatch(format!(
                "Cholesky needs a square matrix, got {}x{}",
                a.rows, a.cols
            )));
        }
        let n = a.rows;
        let max_diag = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
        let tol = CHOLESKY_PIVOT_TOL * max_diag;
        // Right-looking blocked factorization: `work` holds the updated
        // trailing matrix, `l` receives the finished columns.
        let mut work = a.data.clone();
        let mut l = DenseMatrix::zeros(n, n);
        let mut kb = 0;
        while kb < n {
            let ke = (kb + CHOLESKY_BLOCK).min(n);
            for i in kb..n {
                for j in kb..ke.min(i + 1) {
                    let dot: f64 = {
                        let li = &l.data[i * n + kb..i * n + j];
                        let lj = &l.data[j * n + kb..j * n + j];
                        li.iter().zip(lj).map(|(x, y)| x * y).sum()
                    };
                    let v = work[i * n + j] - dot;
                    if i == j {
                        if !v.is_finite() {
                            return Err(LinAlgError::NonFinite);
                        }
                        if v <= tol {
                            return Err(LinAlgError::NotSpd { pivot: i, value: v });
                        }
                        l.data[i * n + i] = v.sqrt();
                    } else {
                        l.data[i * n + j] = v / l.data[j * n + j];
                    }
                }
            }
            if ke < n {
                let rest = n - ke;
                let panel = &l.data[ke * n + kb..];
                gemm_view(
                    (rest, ke - kb, rest),
                    -1.0,
                    panel,
                    (n, 1),
                    panel,
                    (1, n),
                    1.0,
                    &mut work[ke * n + ke..],
                    n,
                );
            }
            kb = ke;
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn factor_l(&self) -> &DenseMatrix {
        &self.l
    }

    /// Solves `L·y = b` in place.
    pub fn forward_vec(&self, b: &mut [f64]) {
        let n = self.l.rows;
        for i in 0..n {
            let row = self.l.row(i);
            let s: f64 = row[..i].iter().zip(&b[..i]).map(|(x, y)| x * y).sum();
            b[i] = (b[i] - s) / row[i];
        }
    }

    /// Solves `Lᵀ·x = y` in place.
    pub fn backward_vec(&self, y: &mut [f64]) {
        let n = self.l.rows;
        for i in (0..n).rev() {
            y[i] /= self.l[(i, i)];
            let yi = y[i];
            let row = self.l.row(i);
            for (yk, lik) in y[..i].iter_mut().zip(&row[..i]) {
                *yk -= lik * yi;
            }
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.dim());
        let mut x = b.to_vec();
        self.forward_vec(&mut x);
        self.backward_vec(&mut x);
        x
    }

    /// Solves `L·X = B` for a block of right-hand sides (rows of `B` are
    /// equations, columns are independent right-hand sides).
    pub fn forward_mat(&self, b: &mut DenseMatrix) {
        let n = self.dim();
        assert_eq!(b.rows, n);
        let m = b.cols;
        let mut kb = 0;
        while kb < n {
            let ke = (kb + CHOLESKY_BLOCK).min(n);
            let (done, rest) = b.data.split_at_mut(kb * m);
            gemm_view(
                (ke - kb, kb, m),
                -1.0,
                &self.l.data[kb * n..],
                (n, 1),
                done,
                (m, 1),
                1.0,
                rest,
                m,
            );
            for i in kb..ke {
                let (head, tail) = b.data.split_at_mut(i * m);
                let bi = &mut tail[..m];
                let li = self.l.row(i);
                for k in kb..i {
                    let lik = li[k];
                    if lik != 0.0 {
                        for (x, y) in bi.iter_mut().zip(&head[k * m..(k + 1) * m]) {
                            *x -= lik * y;
                        }
                    }
                }
                let inv = 1.0 / li[i];
                bi.iter_mut().for_each(|x| *x *= inv);
            }
            kb = ke;
        }
    }

    /// Solves `Lᵀ·X = Y` for a block of right-hand sides.
    pub fn backward_mat(&self, y: &mut DenseMatrix) {
        let n = self.dim();
        assert_eq!(y.rows, n);
        let m = y.cols;
        let mut ke = n;
        while ke > 0 {
            let kb = ke.saturating_sub(CHOLESKY_BLOCK);
            let (head, done) = y.data.split_at_mut(ke * m);
            if ke < n {
                gemm_view(
                (ke - kb, n - ke, m),
                -1.0,
                &self.l.data[ke * n + kb..],
                (1, n),
                done,
                (m, 1),
                1.0,
                &mut head[kb * m..],
                m,
            );
            }
            for i in (kb..ke).rev() {
                let inv = 1.0 / self.l[(i, i)];
                let (head, tail) = y.data.split_at_mut(i * m);
                let yi = &mut tail[..m];
                yi.iter_mut().for_each(|x| *x *= inv);
                let li = self.l.row(i);
                for k in kb..i {
                    let lik = li[k];
                    if lik != 0.0 {
                        for (x, z) in head[k * m..(k + 1) * m].iter_mut().zip(yi.iter()) {
                            *x -= lik * z;
                        }
                    }
                }
            }
            ke = kb;
        }
    }

    pub fn solve_mat(&self, b: &DenseMatrix) -> DenseMatrix {
        let mut x = b.clone();
        self.forward_mat(&mut x);
        self.backward_mat(&mut x);
        x
    }
}

/// Solves `A·X = B` for SPD `A` via Cholesky.
pub fn spd_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(LinAlgError::DimensionMismatch(format!(
            "spd_solve: A is {}x{}, B has {} rows",
            a.rows, a.cols, b.rows
        )));
    }
    if a.rows == 1 {
        let d = a[(0, 0)];
        if d <= 0.0 || !d.is_finite() {
            return Err(LinAlgError::NotSpd { pivot: 0, value: d });
        }
        return Ok(b.scaled(1.0 / d));
    }
    Ok(Cholesky::factor(a)?.solve_mat(b))
}

/// 2-norm condition number `λ_max/λ_min` of an SPD matrix.
pub fn cond2_spd(a: &DenseMatrix) -> Result<f64> {
    let eig = sym_eig(a)?;
    let lo = *eig.values.first().ok_or_else(|| {
        LinAlgError::DimensionMismatch("cond2 of an empty matrix".to_string())
    })?;
    let hi = *eig.values.last().unwrap();
    if lo <= 0.0 {
        return Err(LinAlgError::NotSpd { pivot: 0, value: lo });
    }
    Ok(hi / lo)
}

/// Solves a general square system with partial-pivoting LU.
pub fn lu_solve(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_square() || a.rows != b.rows {
        return Err(LinAlgError::DimensionMismatch(format!(
            "lu_solve: A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.clone();
    let scale = a.max_abs();
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs()))
            .unwrap();
        if lu[(piv, k)].abs() <= 1e-300_f64.max(f64::EPSILON * scale * 1e-3) {
            return Err(LinAlgError::Singular(k));
        }
        if piv != k {
            for j in 0..n {
                lu.data.swap(k * n + j, piv * n + j);
            }
            for j in 0..x.cols {
                let c = x.cols;
                x.data.swap(k * c + j, piv * c + j);
            }
        }
        for i in (k + 1)..n {
            let f = lu[(i, k)] / lu[(k, k)];
            if f == 0.0 {
                continue;
            }
            for j in k..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
            for j in 0..x.cols {
                let v = x[(k, j)];
                x[(i, j)] -= f * v;
            }
        }
    }
    for i in (0..n).rev() {
        for j in 0..x.cols {
            let mut s = x[(i, j)];
            for k in (i + 1)..n {
                s -= lu[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = s / lu[(i, i)];
        }
    }
    Ok(x)
}

pub fn inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    lu_solve(a, &DenseMatrix::identity(a.rows))
}

/// Determinant via partial-pivoting elimination.
pub fn determinant(a: &DenseMatrix) -> f64 {
    assert!(a.is_square());
    let n = a.rows;
    let mut lu = a.clone();
    let mut det = 1.0;
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| lu[(i, k)].abs().total_cmp(&lu[(j, k)].abs()))
            .unwrap();
        if lu[(piv, k)] == 0.0 {
            return 0.0;
        }
        if piv != k {
            for j in 0..n {
                lu.data.swap(k * n + j, piv * n + j);
            }
            det = -det;
        }
        det *= lu[(k, k)];
        for i in (k + 1)..n {
            let f = lu[(i, k)] / lu[(k, k)];
            for j in k..n {
                lu[(i, j)] -= f * lu[(k, j)];
            }
        }
    }
    det
}
