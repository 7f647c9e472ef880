//! Symmetric positive-definite linear solvers for the reduced camera system:
//! dense Cholesky at small scale, sparse left-looking Cholesky above the
//! block-count threshold (natural pose-block ordering, no pivoting).

use nalgebra::{DMatrix, DVector};

/// Pose-block count at and above which the sparse path is used.
pub const SPARSE_THRESHOLD_BLOCKS: usize = 60;

#[derive(Debug, thiserror::Error)]
pub enum LinearSolveError {
    #[error("matrix is not positive definite (factorization failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
}

/// Dense SPD solve via Cholesky.
pub fn solve_dense(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, LinearSolveError> {
    match a.clone().cholesky() {
        Some(chol) => Ok(chol.solve(b)),
        None => Err(LinearSolveError::NotPositiveDefinite { pivot: 0 }),
    }
}

/// Symmetric matrix in compressed sparse column form, lower triangle only
/// (column-sorted row indices, diagonal entry first in each column).
#[derive(Debug, Clone)]
pub struct SparseLower {
    pub n: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl SparseLower {
    /// Builds from (row, col, value) triplets of the lower triangle,
    /// summing duplicates. Triplets with row < col are mirrored down.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        use std::collections::BTreeMap;
        let mut cols: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n];
        for &(r, c, v) in triplets {
            let (r, c) = if r < c { (c, r) } else { (r, c) };
            *cols[c].entry(r).or_insert(0.0) += v;
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        let mut row_idx = Vec::new();
        let mut values = Vec::new();
        col_ptr.push(0);
        for col in &cols {
            for (&r, &v) in col {
                row_idx.push(r);
                values.push(v);
            }
            col_ptr.push(row_idx.len());
        }
        SparseLower {
            n,
            col_ptr,
            row_idx,
            values,
        }
    }
}

/// Sparse Cholesky factor, columns of L stored sparsely.
pub struct SparseCholesky {
    n: usize,
    cols: Vec<Vec<(usize, f64)>>,
}

impl SparseCholesky {
    /// Left-looking factorization `A = L L^T`. Fails on a non-positive pivot.
    pub fn factor(a: &SparseLower) -> Result<Self, LinearSolveError> {
        let n = a.n;
        let mut cols: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        // For each row, the columns k < j whose L column has an entry in that
        // row; filled as factorization sweeps left to right.
        let mut row_lists: Vec<Vec<usize>> = vec![Vec::new(); n];
        let mut work = vec![0.0f64; n];
        let mut marked = vec![false; n];
        let mut touched: Vec<usize> = Vec::new();

        for j in 0..n {
            let touch = |r: usize, touched: &mut Vec<usize>, marked: &mut Vec<bool>| {
                if !marked[r] {
                    marked[r] = true;
                    touched.push(r);
                }
            };
            // Scatter A(:, j) lower part.
            for idx in a.col_ptr[j]..a.col_ptr[j + 1] {
                let r = a.row_idx[idx];
                work[r] = a.values[idx];
                touch(r, &mut touched, &mut marked);
            }
            // Subtract contributions of earlier columns with a row-j entry.
            for &k in &row_lists[j] {
                let col_k = &cols[k];
                let ljk = col_k
                    .iter()
                    .find(|&&(r, _)| r == j)
                    .map(|&(_, v)| v)
                    .unwrap_or(0.0);
                if ljk == 0.0 {
                    continue;
                }
                for &(r, v) in col_k.iter().filter(|&&(r, _)| r >= j) {
                    touch(r, &mut touched, &mut marked);
                    work[r] -= ljk * v;
                }
            }
            let diag = work[j];
            if diag <= 0.0 || !diag.is_finite() {
                return Err(LinearSolveError::NotPositiveDefinite { pivot: j });
            }
            let dsq = diag.sqrt();
            let mut col = Vec::new();
            touched.sort_unstable();
            for &r in touched.iter().filter(|&&r| r >= j) {
                let v = work[r] / dsq;
                if v != 0.0 {
                    col.push((r, v));
                    if r > j {
                        row_lists[r].push(j);
                    }
                }
            }
            for &r in &touched {
                work[r] = 0.0;
                marked[r] = false;
            }
            touched.clear();
            cols.push(col);
        }
        Ok(SparseCholesky { n, cols })
    }

    /// Solves `L L^T x = b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.clone();
        // Forward: L y = b.
        for j in 0..self.n {
            let mut diag = 0.0;
            for &(r, v) in &self.cols[j] {
                if r == j {
                    diag = v;
                    break;
                }
            }
            x[j] /= diag;
            let xj = x[j];
            for &(r, v) in &self.cols[j] {
                if r > j {
                    x[r] -= v * xj;
                }
            }
        }
        // Backward: L^T x = y.
        for j in (0..self.n).rev() {
            let mut sum = x[j];
            let mut diag = 1.0;
            for &(r, v) in &self.cols[j] {
                if r == j {
                    diag = v;
                } else {
                    sum -= v * x[r];
                }
            }
            x[j] = sum / diag;
        }
        x
    }
}
