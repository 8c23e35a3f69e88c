//! Compressed sparse row matrices, preconditioned conjugate gradients and
//! static condensation of element-interior unknowns.

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::densela::{Cholesky, DenseMatrix, LinAlgError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("PCG did not reach tolerance in {} iterations (relative residual {:e})", .0.iterations, .0.residual)]
    MaxIterations(SolveStats),
    #[error("operator is not positive definite (pᵀAp = {value:e} at iteration {iteration})")]
    Indefinite { iteration: usize, value: f64 },
    #[error("preconditioner needs a positive diagonal (row {row} has {value:e})")]
    BadDiagonal { row: usize, value: f64 },
    #[error("internal blocks {0} and {1} are coupled")]
    CoupledBlocks(usize, usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    LinAlg(#[from] LinAlgError),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Zero matrix with the sparsity of the given rows (columns need not be
    /// sorted or unique).
    pub fn from_rows(n: usize, mut rows: Vec<Vec<u32>>) -> Self {
        assert_eq!(rows.len(), n);
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        for r in rows.iter_mut() {
            r.sort_unstable();
            r.dedup();
            col_idx.extend_from_slice(r);
            row_ptr.push(col_idx.len());
        }
        let vals = vec![0.0; col_idx.len()];
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    /// Zero matrix whose pattern couples every pair of DOFs within each group.
    pub fn from_groups<'a>(n: usize, groups: impl Iterator<Item = &'a [usize]>) -> Self {
        let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n];
        for g in groups {
            for &r in g {
                rows[r].extend(g.iter().map(|&c| c as u32));
            }
        }
        Self::from_rows(n, rows)
    }

    pub fn from_dense(a: &DenseMatrix) -> Self {
        let n = a.rows();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for j in 0..a.cols() {
                if a[(i, j)] != 0.0 {
                    col_idx.push(j as u32);
                    vals.push(a[(i, j)]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix {
            n,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                d[(i, self.col_idx[k] as usize)] = self.vals[k];
            }
        }
        d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.vals[r])
    }

    fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .binary_search(&(j as u32))
            .ok()
            .map(|k| r.start + k)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.position(i, j).map_or(0.0, |k| self.vals[k])
    }

    /// Adds `v` at `(i, j)`; the entry must be in the pattern.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self
            .position(i, j)
            .unwrap_or_else(|| panic!("entry ({i}, {j}) is outside the sparsity pattern"));
        self.vals[k] += v;
    }

    /// Adds a dense block `s_k s_l · a[k][l]` at global `(dofs[k], dofs[l])`,
    /// skipping `None` DOFs.
    pub fn add_block(&mut self, dofs: &[Option<usize>], signs: &[f64], a: &DenseMatrix) {
        let mut cols: Vec<(usize, usize)> = dofs
            .iter()
            .enumerate()
            .filter_map(|(l, d)| d.map(|d| (d, l)))
            .collect();
        cols.sort_unstable();
        for (k, dk) in dofs.iter().enumerate() {
            let Some(row) = *dk else { continue };
            let range = self.row_ptr[row]..self.row_ptr[row + 1];
            let rc = &self.col_idx[range.clone()];
            let ak = a.row(k);
            // Both the row pattern and the block columns are sorted: merge.
            let mut p = 0;
            for &(gc, l) in &cols {
                while p < rc.len() && (rc[p] as usize) < gc {
                    p += 1;
                }
                assert!(
                    p < rc.len() && rc[p] as usize == gc,
                    "entry ({row}, {gc}) is outside the sparsity pattern"
                );
                self.vals[range.start + p] += signs[k] * signs[l] * ak[l];
            }
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        y.par_iter_mut().enumerate().for_each(|(i, yi)| {
            let r = self.row_ptr[i]..self.row_ptr[i + 1];
            *yi = self.col_idx[r.clone()]
                .iter()
                .zip(&self.vals[r])
                .map(|(&c, v)| v * x[c as usize])
                .sum();
        });
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn scale(&mut self, s: f64) {
        self.vals.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s · other`; patterns must match.
    pub fn add_scaled(&mut self, s: f64, other: &CsrMatrix) {
        assert!(self.row_ptr == other.row_ptr && self.col_idx == other.col_idx);
        for (a, b) in self.vals.iter_mut().zip(&other.vals) {
            *a += s * b;
        }
    }

    /// Submatrix on the given (sorted or unsorted) index lists.
    pub fn select_dense(&self, rows: &[usize], cols: &[usize]) -> DenseMatrix {
        DenseMatrix::from_fn(rows.len(), cols.len(), |i, j| self.get(rows[i], cols[j]))
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        let max = self.vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        (0..self.n).all(|i| {
            let (c, v) = self.row(i);
            c.iter()
                .zip(v)
                .all(|(&j, &a)| (a - self.get(j as usize, i)).abs() <= rel_tol * max)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preconditioner {
    /// Jacobi scaling (CGD).
    Diagonal,
    /// Forward then backward Gauss-Seidel sweep (CGGS).
    SymmetricGaussSeidel,
}

impl Preconditioner {
    pub fn label(self) -> &'static str {
        match self {
            Preconditioner::Diagonal => "CGD",
            Preconditioner::SymmetricGaussSeidel => "CGGS",
        }
    }
}

impl std::str::FromStr for Preconditioner {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "diagonal" | "cgd" | "jacobi" => Ok(Preconditioner::Diagonal),
            "gauss-seidel" | "gauss_seidel" | "sgs" | "cggs" => Ok(Preconditioner::SymmetricGaussSeidel),
            _ => Err(format!("unknown preconditioner '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PcgConfig {
    pub preconditioner: Preconditioner,
    pub tol: f64,
    pub maxit: usize,
}

impl Default for PcgConfig {
    fn default() -> Self {
        PcgConfig {
            preconditioner: Preconditioner::Diagonal,
            tol: 1e-12,
            maxit: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final unpreconditioned relative residual `‖b − Ax‖/‖b‖`.
    pub residual: f64,
    pub seconds: f64,
    pub preconditioner: Preconditioner,
    /// Whether the solve ran on a condensed boundary system.
    pub condensed: bool,
    pub size: usize,
}

/// Applies `z = M⁻¹ r` for a preconditioner built from a matrix.
#[derive(Debug, Clone)]
pub struct PreconditionerOp<'a> {
    kind: Preconditioner,
    a: &'a CsrMatrix,
    inv_diag: Vec<f64>,
}

impl<'a> PreconditionerOp<'a> {
    pub fn new(a: &'a CsrMatrix, kind: Preconditioner) -> Result<Self> {
        let diag = a.diagonal();
        if let Some((row, &value)) = diag.iter().enumerate().find(|(_, d)| !(**d > 0.0)) {
            return Err(SolverError::BadDiagonal { row, value });
        }
        Ok(PreconditionerOp {
            kind,
            a,
            inv_diag: diag.iter().map(|d| 1.0 / d).collect(),
        })
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self.kind {
            Preconditioner::Diagonal => {
                for ((zi, ri), di) in z.iter_mut().zip(r).zip(&self.inv_diag) {
                    *zi = ri * di;
                }
            }
            Preconditioner::SymmetricGaussSeidel => {
                // (D + L) y = r
                let a = self.a;
                for i in 0..a.n {
                    let (c, v) = a.row(i);
                    let mut s = r[i];
                    for (&j, &aij) in c.iter().zip(v) {
                        let j = j as usize;
                        if j < i {
                            s -= aij * z[j];
                        }
                    }
                    z[i] = s * self.inv_diag[i];
                }
                // (D + U) z = D y
                for i in (0..a.n).rev() {
                    let (c, v) = a.row(i);
                    let mut s = 0.0;
                    for (&j, &aij) in c.iter().zip(v) {
                        let j = j as usize;
                        if j > i {
                            s += aij * z[j];
                        }
                    }
                    z[i] -= s * self.inv_diag[i];
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Preconditioned conjugate gradients from a zero initial guess.
pub fn pcg(a: &CsrMatrix, b: &[f64], cfg: &PcgConfig) -> Result<(Vec<f64>, SolveStats)> {
    pcg_with_monitor(a, b, cfg, |_, _| {})
}

/// PCG calling `monitor(iteration, x)` after every update.
pub fn pcg_with_monitor(
    a: &CsrMatrix,
    b: &[f64],
    cfg: &PcgConfig,
    mut monitor: impl FnMut(usize, &[f64]),
) -> Result<(Vec<f64>, SolveStats)> {
    let start = Instant::now();
    let n = a.n();
    if b.len() != n {
        return Err(SolverError::Dimension(format!("rhs has {} entries, matrix {n}", b.len())));
    }
    let mut stats = SolveStats {
        iterations: 0,
        residual: 0.0,
        seconds: 0.0,
        preconditioner: cfg.preconditioner,
        condensed: false,
        size: n,
    };
    let bnorm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        stats.seconds = start.elapsed().as_secs_f64();
        return Ok((x, stats));
    }
    let prec = PreconditionerOp::new(a, cfg.preconditioner)?;
    let mut r = b.to_vec();
    let mut z = vec![0.0; n];
    prec.apply(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = 1.0;
    for it in 1..=cfg.maxit {
        a.matvec(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(SolverError::Indefinite {
                iteration: it,
                value: pap,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        monitor(it, &x);
        rel = dot(&r, &r).sqrt() / bnorm;
        stats.iterations = it;
        if rel <= cfg.tol {
            stats.residual = rel;
            stats.seconds = start.elapsed().as_secs_f64();
            return Ok((x, stats));
        }
        prec.apply(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    stats.residual = rel;
    stats.seconds = start.elapsed().as_secs_f64();
    Err(SolverError::MaxIterations(stats))
}

/// CSV header for per-solve statistics.
pub const STATS_CSV_HEADER: &str = "step,newton_iter,solver,preconditioner,iterations,residual,seconds";

pub fn stats_csv_row(step: usize, newton_iter: usize, s: &SolveStats) -> String {
    format!(
        "{step},{newton_iter},{},{},{},{:.5e},{:.5e}",
        if s.condensed { "pcg-condensed" } else { "pcg-full" },
        s.preconditioner.label(),
        s.iterations,
        s.residual,
        s.seconds
    )
}

/// Dense element-level (or block-level) operator with its global DOF map.
#[derive(Debug, Clone)]
pub struct LocalBlock {
    /// Global index of each local row/column, `None` for eliminated DOFs.
    pub dofs: Vec<Option<usize>>,
    /// Orientation sign of each local row/column.
    pub signs: Vec<f64>,
    pub matrix: DenseMatrix,
}

/// Data kept per internal block to condense right-hand sides and recover
/// internal unknowns.
#[derive(Debug, Clone)]
struct InternalBlock {
    /// Global internal DOFs of this block.
    internal: Vec<usize>,
    /// Global boundary DOFs coupled to this block.
    boundary: Vec<usize>,
    chol: Cholesky,
    /// `L⁻¹ A_ib`, with `A_ii = L Lᵀ`.
    w: DenseMatrix,
}

/// Boundary system `A_bb − A_bi A_ii⁻¹ A_ib` with block-diagonal `A_ii`.
#[derive(Debug, Clone)]
pub struct CondensedSystem {
    /// Boundary DOFs are the global indices `0..n_boundary`.
    n_boundary: usize,
    n_total: usize,
    schur: CsrMatrix,
    blocks: Vec<InternalBlock>,
}

impl CondensedSystem {
    /// Condenses an operator given element-wise. Global DOFs
    /// `n_boundary..n_total` are internal; each internal DOF must belong to
    /// exactly one block, and every block owns all internal DOFs it touches.
    pub fn from_blocks(n_boundary: usize, n_total: usize, blocks: &[LocalBlock]) -> Result<Self> {
        let reduced: Vec<Reduced> = blocks
            .par_iter()
            .map(|b| condense_block(b, n_boundary))
            .collect::<Result<_>>()?;
        Self::from_reduced(n_boundary, n_total, reduced)
    }

    /// As [`CondensedSystem::from_blocks`], with block `k` produced by
    /// `make(k)` in parallel and dropped right after its condensation.
    pub fn from_block_fn<E, F>(n_boundary: usize, n_total: usize, count: usize, make: F) -> std::result::Result<Self, E>
    where
        E: From<SolverError> + Send,
        F: Fn(usize) -> std::result::Result<LocalBlock, E> + Sync,
    {
        let reduced: Vec<Reduced> = (0..count)
            .into_par_iter()
            .map(|k| Ok(condense_block(&make(k)?, n_boundary)?))
            .collect::<std::result::Result<_, E>>()?;
        Ok(Self::from_reduced(n_boundary, n_total, reduced)?)
    }

    fn from_reduced(n_boundary: usize, n_total: usize, reduced: Vec<Reduced>) -> Result<Self> {
        let mut schur = CsrMatrix::from_groups(n_boundary, reduced.iter().map(|r| r.1.as_slice()));
        let mut out_blocks = Vec::new();
        let mut owner = vec![usize::MAX; n_total - n_boundary];
        for (bi, (s, bdofs, ib)) in reduced.into_iter().enumerate() {
            let d: Vec<Option<usize>> = bdofs.iter().map(|&x| Some(x)).collect();
            schur.add_block(&d, &vec![1.0; d.len()], &s);
            if let Some(ib) = ib {
                for &g in &ib.internal {
                    let o = &mut owner[g - n_boundary];
                    if *o != usize::MAX && *o != bi {
                        return Err(SolverError::CoupledBlocks(*o, bi));
                    }
                    *o = bi;
                }
                out_blocks.push(ib);
            }
        }
        Ok(CondensedSystem {
            n_boundary,
            n_total,
            schur,
            blocks: out_blocks,
        })
    }

    pub fn schur(&self) -> &CsrMatrix {
        &self.schur
    }

    pub fn n_boundary(&self) -> usize {
        self.n_boundary
    }

    pub fn n_total(&self) -> usize {
        self.n_total
    }

    /// Boundary right-hand side `b_b − A_bi A_ii⁻¹ b_i`.
    pub fn condense_rhs(&self, rhs: &[f64]) -> Vec<f64> {
        let mut g = rhs[..self.n_boundary].to_vec();
        for blk in &self.blocks {
            let mut y: Vec<f64> = blk.internal.iter().map(|&i| rhs[i]).collect();
            blk.chol.forward_vec(&mut y);
            let corr = blk.w.tr_matvec(&y);
            for (k, &gb) in blk.boundary.iter().enumerate() {
                g[gb] -= corr[k];
            }
        }
        g
    }

    /// Full solution from the boundary solution: `u_i = A_ii⁻¹(b_i − A_ib u_b)`.
    pub fn recover(&self, rhs: &[f64], u_b: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.n_total];
        u[..self.n_boundary].copy_from_slice(u_b);
        let parts: Vec<(usize, Vec<f64>)> = self
            .blocks
            .par_iter()
            .enumerate()
            .map(|(k, blk)| {
                let mut y: Vec<f64> = blk.internal.iter().map(|&i| rhs[i]).collect();
                blk.chol.forward_vec(&mut y);
                let ub: Vec<f64> = blk.boundary.iter().map(|&b| u_b[b]).collect();
                let wu = blk.w.matvec(&ub);
                for (yi, wi) in y.iter_mut().zip(&wu) {
                    *yi -= wi;
                }
                blk.chol.backward_vec(&mut y);
                (k, y)
            })
            .collect();
        for (k, y) in parts {
            for (&i, v) in self.blocks[k].internal.iter().zip(y) {
                u[i] = v;
            }
        }
        u
    }

    /// Condense, solve the boundary system by PCG and recover.
    pub fn solve(&self, rhs: &[f64], cfg: &PcgConfig) -> Result<(Vec<f64>, SolveStats)> {
        let g = self.condense_rhs(rhs);
        let (ub, mut stats) = match pcg(&self.schur, &g, cfg) {
            Ok(r) => r,
            Err(SolverError::MaxIterations(mut s)) => {
                s.condensed = true;
                return Err(SolverError::MaxIterations(s));
            }
            Err(e) => return Err(e),
        };
        stats.condensed = true;
        Ok((self.recover(rhs, &ub), stats))
    }
}

/// Schur complement of one block; returns the dense boundary contribution,
/// its global boundary DOFs and the retained internal data.
type Reduced = (DenseMatrix, Vec<usize>, Option<InternalBlock>);

fn condense_block(b: &LocalBlock, n_boundary: usize) -> Result<Reduced> {
    let mut bl = Vec::new();
    let mut il = Vec::new();
    for (l, d) in b.dofs.iter().enumerate() {
        match d {
            Some(g) if *g < n_boundary => bl.push(l),
            Some(_) => il.push(l),
            None => {}
        }
    }
    let signed = |rows: &[usize], cols: &[usize]| {
        DenseMatrix::from_fn(rows.len(), cols.len(), |i, j| {
            let (r, c) = (rows[i], cols[j]);
            b.signs[r] * b.signs[c] * b.matrix[(r, c)]
        })
    };
    let boundary: Vec<usize> = bl.iter().map(|&l| b.dofs[l].unwrap()).collect();
    let mut s = signed(&bl, &bl);
    if il.is_empty() {
        return Ok((s, boundary, None));
    }
    let a_ii = signed(&il, &il);
    let chol = Cholesky::factor(&a_ii)?;
    let mut w = signed(&il, &bl);
    chol.forward_mat(&mut w);
    crate::densela::gemm(-1.0, &w, true, &w, false, 1.0, &mut s);
    s.symmetrize();
    let internal = il.iter().map(|&l| b.dofs[l].unwrap()).collect();
    Ok((
        s,
        boundary.clone(),
        Some(InternalBlock {
            internal,
            boundary,
            chol,
            w,
        }),
    ))
}

/// Condenses a global matrix whose internal unknowns form the given
/// mutually uncoupled blocks. Returns the condensed system and the
/// permutation from the condensed numbering back to the original indices.
pub fn condense(a: &CsrMatrix, internal_blocks: &[Vec<usize>]) -> Result<(CondensedSystem, Vec<usize>)> {
    let n = a.n();
    let mut is_internal = vec![usize::MAX; n];
    for (k, blk) in internal_blocks.iter().enumerate() {
        for &i in blk {
            if i >= n {
                return Err(SolverError::Dimension(format!("internal index {i} out of range")));
            }
            if is_internal[i] != usize::MAX {
                return Err(SolverError::CoupledBlocks(is_internal[i], k));
            }
            is_internal[i] = k;
        }
    }
    for i in 0..n {
        if is_internal[i] == usize::MAX {
            continue;
        }
        let (cols, vals) = a.row(i);
        for (&j, &v) in cols.iter().zip(vals) {
            let bj = is_internal[j as usize];
            if v != 0.0 && bj != usize::MAX && bj != is_internal[i] {
                return Err(SolverError::CoupledBlocks(is_internal[i], bj));
            }
        }
    }
    // New numbering: boundary first, then blocks in order.
    let mut perm: Vec<usize> = (0..n).filter(|&i| is_internal[i] == usize::MAX).collect();
    let n_b = perm.len();
    for blk in internal_blocks {
        perm.extend_from_slice(blk);
    }
    let mut inv = vec![0; n];
    for (new, &old) in perm.iter().enumerate() {
        inv[old] = new;
    }
    // One local block for A_bb, one per internal block with its coupling.
    let bdofs: Vec<usize> = perm[..n_b].to_vec();
    let mut local = Vec::with_capacity(internal_blocks.len() + 1);
    local.push(LocalBlock {
        dofs: bdofs.iter().map(|&o| Some(inv[o])).collect(),
        signs: vec![1.0; n_b],
        matrix: a.select_dense(&bdofs, &bdofs),
    });
    for blk in internal_blocks {
        let mut coupled: Vec<usize> = Vec::new();
        for &i in blk {
            let (cols, _) = a.row(i);
            coupled.extend(cols.iter().map(|&j| j as usize).filter(|&j| is_internal[j] == usize::MAX));
        }
        coupled.sort_unstable();
        coupled.dedup();
        let mut idx = coupled.clone();
        idx.extend_from_slice(blk);
        let mut m = a.select_dense(&idx, &idx);
        // A_bb is carried by the first block.
        for i in 0..coupled.len() {
            for j in 0..coupled.len() {
                m[(i, j)] = 0.0;
            }
        }
        local.push(LocalBlock {
            dofs: idx.iter().map(|&o| Some(inv[o])).collect(),
            signs: vec![1.0; idx.len()],
            matrix: m,
        });
    }
    Ok((CondensedSystem::from_blocks(n_b, n, &local)?, perm))
}
