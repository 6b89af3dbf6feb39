//! Compressed sparse row matrices and the two solver paths: sparse LU with
//! partial pivoting (through `faer`) and restarted GMRES preconditioned by
//! ILU(0).
//!
//! Every solve recomputes `||Ax - b||` from scratch before reporting it.

use std::io::{self, Write};

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::linalg::LuError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, Mat};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinsysError {
    #[error("entry ({row}, {col}) outside a {n} x {n} matrix")]
    IndexOutOfRange { row: usize, col: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is singular{}", match .pivot { Some(p) => format!(" at pivot {p}"), None => String::new() })]
    SingularMatrix { pivot: Option<usize> },
    #[error("GMRES stopped after {iterations} iterations with residual {residual:e}")]
    MaxIterations {
        best: Vec<f64>,
        residual: f64,
        iterations: usize,
    },
    #[error("factorization failed: {0}")]
    Factorization(String),
}

/// Square sparse matrix in CSR layout with sorted, unique column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Build from `(row, col, value)` triplets; duplicates are summed.
    pub fn assemble(n: usize, triplets: &[(usize, usize, f64)]) -> Result<Self, LinsysError> {
        let mut count = vec![0usize; n + 1];
        for &(row, col, _) in triplets {
            if row >= n || col >= n {
                return Err(LinsysError::IndexOutOfRange { row, col, n });
            }
            count[row + 1] += 1;
        }
        for i in 0..n {
            count[i + 1] += count[i];
        }
        let mut next = count.clone();
        let mut entries = vec![(0usize, 0.0f64); triplets.len()];
        for &(row, col, v) in triplets {
            entries[next[row]] = (col, v);
            next[row] += 1;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for i in 0..n {
            let row = &mut entries[count[i]..count[i + 1]];
            row.sort_by_key(|e| e.0);
            for &(c, v) in row.iter() {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// A zero matrix with the given per-row column sets (sorted and
    /// deduplicated here).
    pub fn from_pattern(rows: Vec<Vec<usize>>) -> Result<Self, LinsysError> {
        let n = rows.len();
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        for (i, mut r) in rows.into_iter().enumerate() {
            r.sort_unstable();
            r.dedup();
            if let Some(&c) = r.last() {
                if c >= n {
                    return Err(LinsysError::IndexOutOfRange { row: i, col: c, n });
                }
            }
            col_idx.extend(r);
            row_ptr.push(col_idx.len());
        }
        let nnz = col_idx.len();
        Ok(Self {
            n,
            row_ptr,
            col_idx,
            values: vec![0.0; nnz],
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Position of entry `(row, col)` in the value array.
    pub fn find(&self, row: usize, col: usize) -> Option<usize> {
        let lo = self.row_ptr[row];
        let hi = self.row_ptr[row + 1];
        self.col_idx[lo..hi]
            .binary_search(&col)
            .ok()
            .map(|k| lo + k)
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.find(row, col).map_or(0.0, |k| self.values[k])
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    /// Zero row `i` and put `diag` on its diagonal (which must be stored).
    pub fn replace_row_with_identity(&mut self, i: usize, diag: f64) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        for k in r {
            self.values[k] = if self.col_idx[k] == i { diag } else { 0.0 };
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "matvec dimension mismatch");
        (0..self.n)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect()
    }

    /// Largest absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|i| self.row(i).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn norm_frobenius(&self) -> f64 {
        norm2(&self.values)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for (j, v) in self.row(i) {
                row[j] = v;
            }
        }
        d
    }

    /// MatrixMarket coordinate format, general real, 1-based indices.
    pub fn write_matrix_market<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
        writeln!(w, "{} {} {}", self.n, self.n, self.nnz())?;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
            }
        }
        Ok(())
    }

    fn check_rhs(&self, b: &[f64]) -> Result<(), LinsysError> {
        if b.len() != self.n {
            return Err(LinsysError::DimensionMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        Ok(())
    }

    /// The transpose pattern seen through faer's column-major view: the CSR
    /// arrays of `A` are exactly the CSC arrays of `A^T`.
    fn transpose_view(&self) -> SparseColMatRef<'_, usize, f64> {
        let sym = SymbolicSparseColMatRef::new_checked(
            self.n,
            self.n,
            &self.row_ptr,
            None,
            &self.col_idx,
        );
        SparseColMatRef::new(sym, &self.values)
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `||Ax - b||_2`.
pub fn residual_norm(a: &SparseMatrix, x: &[f64], b: &[f64]) -> f64 {
    let ax = a.matvec(x);
    norm2(&ax.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    DirectLu,
    Gmres,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSolveReport {
    pub method: SolveMethod,
    /// `||Ax - b||_2` recomputed after the solve.
    pub residual_norm: f64,
    pub rhs_norm: f64,
    /// Refinement steps (direct) or Krylov iterations (GMRES).
    pub iterations: usize,
    pub converged: bool,
    pub nnz: usize,
}

/// Symbolic LU analysis, reusable for every matrix with the same pattern.
#[derive(Debug, Clone)]
pub struct DirectSolver {
    symbolic: SymbolicLu<usize>,
    n: usize,
    nnz: usize,
}

impl DirectSolver {
    pub fn analyze(a: &SparseMatrix) -> Result<Self, LinsysError> {
        let symbolic = SymbolicLu::try_new(a.transpose_view().symbolic())
            .map_err(|e| LinsysError::Factorization(format!("{e:?}")))?;
        Ok(Self {
            symbolic,
            n: a.n,
            nnz: a.nnz(),
        })
    }

    pub fn factor<'a>(&self, a: &'a SparseMatrix) -> Result<Factorization<'a>, LinsysError> {
        if a.n != self.n || a.nnz() != self.nnz {
            return Err(LinsysError::DimensionMismatch {
                expected: self.nnz,
                got: a.nnz(),
            });
        }
        let lu = Lu::try_new_with_symbolic(self.symbolic.clone(), a.transpose_view()).map_err(
            |e| match e {
                LuError::SymbolicSingular { index } => LinsysError::SingularMatrix {
                    pivot: Some(index),
                },
                LuError::Generic(g) => LinsysError::Factorization(format!("{g:?}")),
            },
        )?;
        Ok(Factorization { lu, a })
    }
}

/// A numeric LU factorization tied to its matrix. Solves take `&self`, so
/// several right-hand sides may be solved concurrently.
pub struct Factorization<'a> {
    lu: Lu<usize, f64>,
    a: &'a SparseMatrix,
}

impl Factorization<'_> {
    fn apply(&self, b: &[f64]) -> Vec<f64> {
        let mut rhs = Mat::from_fn(b.len(), 1, |i, _| b[i]);
        // The factors belong to A^T, so A x = b is the transposed solve.
        self.lu
            .solve_transpose_in_place_with_conj(Conj::No, rhs.as_mut());
        (0..b.len()).map(|i| rhs[(i, 0)]).collect()
    }

    /// Solve with up to three steps of iterative refinement, then check
    /// `||Ax - b|| <= 1e-10 (||A|| ||x|| + ||b||)`.
    pub fn solve(&self, b: &[f64]) -> Result<(Vec<f64>, LinearSolveReport), LinsysError> {
        let a = self.a;
        a.check_rhs(b)?;
        let mut x = self.apply(b);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(LinsysError::SingularMatrix { pivot: None });
        }
        let norm_a = a.norm_inf();
        let norm_b = norm2(b);
        let bound = |x: &[f64]| 1e-10 * (norm_a * norm2(x) + norm_b);
        let mut res = residual_norm(a, &x, b);
        let mut steps = 0;
        while res > 1e-3 * bound(&x) && steps < 3 {
            let r: Vec<f64> = a.matvec(&x).iter().zip(b).map(|(p, q)| q - p).collect();
            let dx = self.apply(&r);
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(x, d)| x + d).collect();
            let trial_res = residual_norm(a, &trial, b);
            steps += 1;
            if !(trial_res < res) {
                break;
            }
            x = trial;
            res = trial_res;
        }
        if !(res <= bound(&x)) {
            return Err(LinsysError::SingularMatrix { pivot: None });
        }
        Ok((
            x,
            LinearSolveReport {
                method: SolveMethod::DirectLu,
                residual_norm: res,
                rhs_norm: norm_b,
                iterations: steps,
                converged: true,
                nnz: a.nnz(),
            },
        ))
    }
}

/// Sparse LU with partial pivoting.
pub fn solve_direct(
    a: &SparseMatrix,
    b: &[f64],
) -> Result<(Vec<f64>, LinearSolveReport), LinsysError> {
    a.check_rhs(b)?;
    DirectSolver::analyze(a)?.factor(a)?.solve(b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmresOptions {
    /// Relative tolerance on `||Ax - b|| / ||b||`.
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
}

impl Default for GmresOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 2000,
            restart: 60,
        }
    }
}

/// Incomplete LU with the sparsity of `A`. Zero pivots (the pressure block of
/// a saddle-point matrix) are replaced by a small multiple of the row scale.
struct Ilu0 {
    lu: SparseMatrix,
    diag: Vec<usize>,
}

impl Ilu0 {
    fn new(a: &SparseMatrix) -> Self {
        let n = a.n;
        let mut lu = a.clone();
        let mut diag = vec![usize::MAX; n];
        let scale = a.norm_inf().max(f64::MIN_POSITIVE);
        for i in 0..n {
            if lu.find(i, i).is_none() {
                // Structurally missing diagonal: rebuild with it added.
                let mut rows: Vec<Vec<usize>> = (0..n)
                    .map(|r| lu.row(r).map(|(c, _)| c).collect())
                    .collect();
                for (r, row) in rows.iter_mut().enumerate() {
                    row.push(r);
                }
                let mut full = SparseMatrix::from_pattern(rows).expect("indices in range");
                for r in 0..n {
                    for (c, v) in a.row(r) {
                        let k = full.find(r, c).unwrap();
                        full.values[k] = v;
                    }
                }
                lu = full;
                break;
            }
        }
        for (i, d) in diag.iter_mut().enumerate() {
            *d = lu.find(i, i).unwrap();
        }
        for i in 0..n {
            let (lo, hi) = (lu.row_ptr[i], lu.row_ptr[i + 1]);
            for kk in lo..hi {
                let k = lu.col_idx[kk];
                if k >= i {
                    break;
                }
                let pivot = lu.values[diag[k]];
                lu.values[kk] /= pivot;
                let lik = lu.values[kk];
                for jj in (kk + 1)..hi {
                    let j = lu.col_idx[jj];
                    if let Some(kj) = lu.find(k, j) {
                        lu.values[jj] -= lik * lu.values[kj];
                    }
                }
            }
            let d = &mut lu.values[diag[i]];
            if d.abs() < 1e-12 * scale {
                *d = if *d < 0.0 { -1e-8 } else { 1e-8 } * scale;
            }
        }
        Self { lu, diag }
    }

    fn apply(&self, r: &[f64]) -> Vec<f64> {
        let n = r.len();
        let lu = &self.lu;
        let mut y = r.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in lu.row_ptr[i]..self.diag[i] {
                s -= lu.values[k] * y[lu.col_idx[k]];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (self.diag[i] + 1)..lu.row_ptr[i + 1] {
                s -= lu.values[k] * y[lu.col_idx[k]];
            }
            y[i] = s / lu.values[self.diag[i]];
        }
        y
    }
}

/// Restarted GMRES with right ILU(0) preconditioning, starting from zero.
pub fn solve_iterative(
    a: &SparseMatrix,
    b: &[f64],
    opts: GmresOptions,
) -> Result<(Vec<f64>, LinearSolveReport), LinsysError> {
    a.check_rhs(b)?;
    assert!(opts.tol > 0.0, "GMRES tolerance must be positive");
    let n = a.n;
    let norm_b = norm2(b);
    let report = |res: f64, it: usize, conv: bool| LinearSolveReport {
        method: SolveMethod::Gmres,
        residual_norm: res,
        rhs_norm: norm_b,
        iterations: it,
        converged: conv,
        nnz: a.nnz(),
    };
    let mut x = vec![0.0; n];
    if norm_b == 0.0 {
        return Ok((x, report(0.0, 0, true)));
    }
    let target = opts.tol * norm_b;
    let m = opts.restart.max(1);
    let pre = Ilu0::new(a);
    let mut iters = 0;
    let mut best = (f64::INFINITY, x.clone());
    while iters < opts.max_iter {
        let r: Vec<f64> = a.matvec(&x).iter().zip(b).map(|(p, q)| q - p).collect();
        let beta = norm2(&r);
        if beta < best.0 {
            best = (beta, x.clone());
        }
        if beta <= target {
            break;
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|t| t / beta).collect()];
        let mut hess = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            if iters >= opts.max_iter {
                break;
            }
            iters += 1;
            let z = pre.apply(&v[k]);
            let mut w = a.matvec(&z);
            for (j, vj) in v.iter().enumerate() {
                let h: f64 = w.iter().zip(vj).map(|(p, q)| p * q).sum();
                hess[j][k] = h;
                for (wi, vi) in w.iter_mut().zip(vj) {
                    *wi -= h * vi;
                }
            }
            let hn = norm2(&w);
            hess[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                hess[j][k] = t;
            }
            let denom = hess[k][k].hypot(hess[k + 1][k]);
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = hess[k][k] / denom;
            sn[k] = hess[k + 1][k] / denom;
            hess[k][k] = denom;
            hess[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() <= 0.5 * target || hn == 0.0 {
                break;
            }
            v.push(w.iter().map(|t| t / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = ((i + 1)..k_used).map(|j| hess[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / hess[i][i];
        }
        let mut dz = vec![0.0; n];
        for (j, yj) in y.iter().enumerate() {
            for (d, vj) in dz.iter_mut().zip(&v[j]) {
                *d += yj * vj;
            }
        }
        let dx = pre.apply(&dz);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        if k_used == 0 {
            break;
        }
    }
    let res = residual_norm(a, &x, b);
    if res < best.0 {
        best = (res, x.clone());
    }
    if best.0 <= target {
        Ok((best.1, report(best.0, iters, true)))
    } else {
        Err(LinsysError::MaxIterations {
            best: best.1,
            residual: best.0,
            iterations: iters,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dense_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n)
                .max_by(|&i, &j| a[i][c].abs().partial_cmp(&a[j][c].abs()).unwrap())
                .unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in (c + 1)..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = ((r + 1)..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }

    fn random_spd(n: usize, seed: u64) -> SparseMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            for _ in 0..3 {
                let j = rng.random_range(0..n);
                if j != i {
                    let v: f64 = rng.random_range(-0.5..0.5);
                    t.push((i, j, v));
                    t.push((j, i, v));
                    t.push((i, i, v.abs()));
                    t.push((j, j, v.abs()));
                }
            }
        }
        SparseMatrix::assemble(n, &t).unwrap()
    }

    #[test]
    fn assembly_matches_dense_accumulation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 30;
        let t: Vec<(usize, usize, f64)> = (0..500)
            .map(|_| (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(-1.0..1.0)))
            .collect();
        let a = SparseMatrix::assemble(n, &t).unwrap();
        let mut dense = vec![vec![0.0; n]; n];
        let mut seen = vec![vec![false; n]; n];
        for &(i, j, v) in &t {
            dense[i][j] += v;
            seen[i][j] = true;
        }
        assert_eq!(a.to_dense(), dense);
        for i in 0..n {
            let cols: Vec<usize> = a.row(i).map(|(c, _)| c).collect();
            assert!(cols.windows(2).all(|w| w[0] < w[1]));
            assert_eq!(cols.len(), seen[i].iter().filter(|&&s| s).count());
        }
    }

    #[test]
    fn assembly_edge_cases() {
        let id = SparseMatrix::assemble(3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]).unwrap();
        assert_eq!(id, SparseMatrix::identity(3));
        let empty = SparseMatrix::assemble(4, &[]).unwrap();
        assert_eq!(empty.nnz(), 0);
        assert_eq!(empty.matvec(&[1.0; 4]), vec![0.0; 4]);
        assert!(matches!(
            SparseMatrix::assemble(2, &[(0, 2, 1.0)]),
            Err(LinsysError::IndexOutOfRange { row: 0, col: 2, n: 2 })
        ));
    }

    #[test]
    fn direct_trivial_systems() {
        let (x, rep) = solve_direct(&SparseMatrix::identity(5), &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(rep.residual_norm, 0.0);
        let d = SparseMatrix::assemble(3, &[(0, 0, 2.0), (1, 1, -4.0), (2, 2, 0.5)]).unwrap();
        let (x, _) = solve_direct(&d, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(x, vec![0.5, -0.25, 2.0]);
    }

    #[test]
    fn direct_matches_dense_oracle() {
        let a = random_spd(200, 5);
        let b: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let (x, rep) = solve_direct(&a, &b).unwrap();
        let xd = dense_solve(a.to_dense(), b.clone());
        let err = x.iter().zip(&xd).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
        let res = residual_norm(&a, &x, &b);
        assert!((rep.residual_norm - res).abs() <= 1e-12 * res.max(1e-300));
    }

    #[test]
    fn direct_detects_singularity() {
        let a = SparseMatrix::assemble(3, &[(0, 0, 1.0), (1, 1, 1.0), (2, 1, 1.0)]).unwrap();
        assert!(matches!(solve_direct(&a, &[1.0; 3]), Err(LinsysError::SingularMatrix { .. })));
        let b = SparseMatrix::assemble(2, &[(0, 0, 1.0), (0, 1, 2.0), (1, 0, 2.0), (1, 1, 4.0)]).unwrap();
        assert!(matches!(solve_direct(&b, &[1.0, 0.0]), Err(LinsysError::SingularMatrix { .. })));
    }

    #[test]
    fn saddle_point_system_is_factored() {
        // [[2, 0, 1], [0, 3, 1], [1, 1, 0]]
        let a = SparseMatrix::assemble(
            3,
            &[(0, 0, 2.0), (1, 1, 3.0), (0, 2, 1.0), (2, 0, 1.0), (1, 2, 1.0), (2, 1, 1.0)],
        )
        .unwrap();
        let b = [1.0, 2.0, 0.5];
        let (x, _) = solve_direct(&a, &b).unwrap();
        assert!(residual_norm(&a, &x, &b) < 1e-14);
        let (y, rep) = solve_iterative(&a, &b, GmresOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(x.iter().zip(&y).all(|(p, q)| (p - q).abs() < 1e-8));
    }

    #[test]
    fn symbolic_analysis_is_reused() {
        let mut a = random_spd(50, 2);
        let solver = DirectSolver::analyze(&a).unwrap();
        let b = vec![1.0; 50];
        let (x1, _) = solver.factor(&a).unwrap().solve(&b).unwrap();
        for v in a.values_mut() {
            *v *= 2.0;
        }
        let (x2, _) = solver.factor(&a).unwrap().solve(&b).unwrap();
        assert!(x1.iter().zip(&x2).all(|(p, q)| (p - 2.0 * q).abs() < 1e-12));
    }

    #[test]
    fn gmres_trivial_and_oracle() {
        let (x, rep) = solve_iterative(&SparseMatrix::identity(4), &[1.0, -1.0, 2.0, 0.0], GmresOptions::default()).unwrap();
        assert!(rep.converged);
        assert!(x.iter().zip([1.0, -1.0, 2.0, 0.0]).all(|(p, q)| (p - q).abs() < 1e-14));
        let d = SparseMatrix::assemble(3, &[(0, 0, 2.0), (1, 1, -4.0), (2, 2, 0.5)]).unwrap();
        let (x, _) = solve_iterative(&d, &[1.0, 1.0, 1.0], GmresOptions::default()).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] + 0.25).abs() < 1e-12 && (x[2] - 2.0).abs() < 1e-12);
        let a = random_spd(200, 9);
        let b: Vec<f64> = (0..200).map(|i| (i as f64).cos()).collect();
        let (xi, rep) = solve_iterative(&a, &b, GmresOptions::default()).unwrap();
        let (xd, _) = solve_direct(&a, &b).unwrap();
        assert!(xi.iter().zip(&xd).all(|(p, q)| (p - q).abs() < 1e-8));
        assert!((rep.residual_norm - residual_norm(&a, &xi, &b)).abs() <= 1e-12 * rep.residual_norm.max(1e-300));
    }

    #[test]
    fn gmres_reports_best_iterate_on_failure() {
        let a = random_spd(100, 3);
        let b = vec![1.0; 100];
        let opts = GmresOptions { tol: 1e-14, max_iter: 2, restart: 1 };
        match solve_iterative(&a, &b, opts) {
            Err(LinsysError::MaxIterations { best, residual, iterations }) => {
                assert_eq!(iterations, 2);
                assert!((residual_norm(&a, &best, &b) - residual).abs() < 1e-12);
                assert!(residual < norm2(&b));
            }
            other => panic!("expected MaxIterations, got {other:?}"),
        }
    }

    #[test]
    fn matrix_market_dump() {
        let a = SparseMatrix::assemble(2, &[(0, 0, 1.5), (1, 0, -2.0)]).unwrap();
        let mut out = Vec::new();
        a.write_matrix_market(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "%%MatrixMarket matrix coordinate real general");
        assert_eq!(lines[1], "2 2 2");
        assert_eq!(lines[2], "1 1 1.5e0");
        assert_eq!(lines[3], "2 1 -2e0");
    }

    proptest::proptest! {
        #[test]
        fn direct_and_gmres_agree(seed in 0u64..1000) {
            let a = random_spd(40, seed);
            let b: Vec<f64> = (0..40).map(|i| ((i as u64 + seed) as f64).sin()).collect();
            let (xd, rd) = solve_direct(&a, &b).unwrap();
            let (xi, ri) = solve_iterative(&a, &b, GmresOptions::default()).unwrap();
            proptest::prop_assert!(xd.iter().zip(&xi).all(|(p, q)| (p - q).abs() < 1e-8));
            proptest::prop_assert!((rd.residual_norm - residual_norm(&a, &xd, &b)).abs() <= 1e-12 * (1e-300 + rd.residual_norm));
            proptest::prop_assert!(ri.residual_norm <= 1e-10 * norm2(&b));
        }
    }
}
