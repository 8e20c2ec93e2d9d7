//! Compressed sparse row matrices and an envelope (skyline) Cholesky solver
//! with reverse Cuthill-McKee reordering.

use std::collections::VecDeque;

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SparseError {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is not square ({0}x{1})")]
    NotSquare(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Sums duplicate entries. Entries are merged in sorted (row, col) order
    /// so the result does not depend on the order of `triplets` beyond the
    /// summation order of duplicates, which is kept stable.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.sort_by_key(|&k| (triplets[k].0, triplets[k].1));
        let mut row_ptr = vec![0usize; n_rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for k in order {
            let (r, c, v) = triplets[k];
            assert!(r < n_rows && c < n_cols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
            } else {
                col_idx.push(c);
                values.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        CsrMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn from_dense(a: &DMatrix<f64>) -> Self {
        let mut t = Vec::new();
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                if a[(i, j)] != 0.0 {
                    t.push((i, j, a[(i, j)]));
                }
            }
        }
        Self::from_triplets(a.nrows(), a.ncols(), &t)
    }

    pub fn nrows(&self) -> usize {
        self.n_rows
    }

    pub fn ncols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(k) => vals[k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n_rows];
        self.mul_vec_into(x, &mut y);
        y
    }

    pub fn mul_vec_into(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(y.len(), self.n_rows);
        for (i, yi) in y.iter_mut().enumerate() {
            let (cols, vals) = self.row(i);
            *yi = cols.iter().zip(vals).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    /// `self * B` for a dense `B`.
    pub fn mul_dense(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(b.nrows(), self.n_cols);
        let mut out = DMatrix::zeros(self.n_rows, b.ncols());
        for j in 0..b.ncols() {
            let col = self.mul_vec(b.column(j).as_slice());
            out.column_mut(j).copy_from_slice(&col);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_rows, self.n_cols);
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&c, &v) in cols.iter().zip(vals) {
                a[(i, c)] = v;
            }
        }
        a
    }

    /// Max absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.n_rows)
            .map(|i| self.row(i).1.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `‖A − Aᵀ‖∞`.
    pub fn asymmetry_inf(&self) -> f64 {
        (0..self.n_rows)
            .map(|i| {
                let (cols, vals) = self.row(i);
                cols.iter()
                    .zip(vals)
                    .map(|(&c, &v)| (v - self.get(c, i)).abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max)
    }

    /// The submatrix `A[keep, keep]`, rows and columns renumbered in the order
    /// of `keep`.
    pub fn principal_submatrix(&self, keep: &[usize]) -> CsrMatrix {
        let mut map = vec![usize::MAX; self.n_cols];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let mut t = Vec::new();
        for (new_r, &r) in keep.iter().enumerate() {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                if map[c] != usize::MAX {
                    t.push((new_r, map[c], v));
                }
            }
        }
        CsrMatrix::from_triplets(keep.len(), keep.len(), &t)
    }
}

/// Reverse Cuthill-McKee ordering of the symmetric sparsity pattern of `a`.
/// `perm[k]` is the original index placed at position `k`.
pub fn rcm_ordering(a: &CsrMatrix) -> Vec<usize> {
    let n = a.nrows();
    let degree: Vec<usize> = (0..n).map(|i| a.row(i).0.len()).collect();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = VecDeque::new();
    while order.len() < n {
        // Start each component from a minimum-degree node.
        let start = (0..n)
            .filter(|&i| !visited[i])
            .min_by_key(|&i| (degree[i], i))
            .unwrap();
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = a
                .row(v)
                .0
                .iter()
                .copied()
                .filter(|&c| c != v && !visited[c])
                .collect();
            next.sort_by_key(|&c| (degree[c], c));
            for c in next {
                visited[c] = true;
                queue.push_back(c);
            }
        }
    }
    order.reverse();
    order
}

/// Cholesky factor `L` of a symmetric positive definite matrix stored by
/// rows over its envelope, after a fill-reducing symmetric permutation.
#[derive(Debug, Clone)]
pub struct EnvelopeCholesky {
    n: usize,
    perm: Vec<usize>,
    first: Vec<usize>,
    start: Vec<usize>,
    data: Vec<f64>,
}

impl EnvelopeCholesky {
    pub fn factor(a: &CsrMatrix) -> Result<Self, SparseError> {
        Self::factor_with(a, rcm_ordering(a))
    }

    pub fn factor_with(a: &CsrMatrix, perm: Vec<usize>) -> Result<Self, SparseError> {
        if a.nrows() != a.ncols() {
            return Err(SparseError::NotSquare(a.nrows(), a.ncols()));
        }
        let n = a.nrows();
        let mut inv = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            inv[p] = k;
        }
        // Envelope of the permuted lower triangle.
        let mut first: Vec<usize> = (0..n).collect();
        for (i, &pi) in perm.iter().enumerate() {
            for &c in a.row(pi).0 {
                first[i] = first[i].min(inv[c]);
            }
        }
        let mut start = vec![0usize; n + 1];
        for i in 0..n {
            start[i + 1] = start[i] + (i - first[i] + 1);
        }
        let mut data = vec![0.0; start[n]];
        for (i, &pi) in perm.iter().enumerate() {
            let (cols, vals) = a.row(pi);
            for (&c, &v) in cols.iter().zip(vals) {
                let j = inv[c];
                if j <= i {
                    data[start[i] + j - first[i]] = v;
                }
            }
        }
        for i in 0..n {
            let fi = first[i];
            for j in fi..i {
                let fj = first[j];
                let k0 = fi.max(fj);
                let mut s = data[start[i] + j - fi];
                let ri = &data[start[i] + k0 - fi..start[i] + j - fi];
                let rj = &data[start[j] + k0 - fj..start[j] + j - fj];
                s -= ri.iter().zip(rj).map(|(x, y)| x * y).sum::<f64>();
                data[start[i] + j - fi] = s / data[start[j + 1] - 1];
            }
            let row = &data[start[i]..start[i + 1] - 1];
            let d = data[start[i + 1] - 1] - row.iter().map(|x| x * x).sum::<f64>();
            if !(d > 0.0) || !d.is_finite() {
                return Err(SparseError::NotPositiveDefinite {
                    pivot: perm[i],
                    value: d,
                });
            }
            data[start[i + 1] - 1] = d.sqrt();
        }
        Ok(EnvelopeCholesky {
            n,
            perm,
            first,
            start,
            data,
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries of the factor.
    pub fn envelope_size(&self) -> usize {
        self.data.len()
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let mut y: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // L y = b
        for i in 0..self.n {
            let fi = self.first[i];
            let row = &self.data[self.start[i]..self.start[i + 1] - 1];
            let s: f64 = row.iter().zip(&y[fi..i]).map(|(l, v)| l * v).sum();
            y[i] = (y[i] - s) / self.data[self.start[i + 1] - 1];
        }
        // Lᵀ x = y
        for i in (0..self.n).rev() {
            y[i] /= self.data[self.start[i + 1] - 1];
            let fi = self.first[i];
            let yi = y[i];
            let row = &self.data[self.start[i]..self.start[i + 1] - 1];
            for (l, v) in row.iter().zip(&mut y[fi..i]) {
                *v -= l * yi;
            }
        }
        let mut x = vec![0.0; self.n];
        for (k, &p) in self.perm.iter().enumerate() {
            x[p] = y[k];
        }
        x
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(b.nrows(), b.ncols());
        for j in 0..b.ncols() {
            let x = self.solve(b.column(j).as_slice());
            out.column_mut(j).copy_from_slice(&x);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd_banded(n: usize, band: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(band)..=i {
                if rng.random::<f64>() < 0.6 {
                    b[(i, j)] = rng.random_range(-1.0..1.0);
                }
            }
        }
        // Scramble labels so the ordering has work to do.
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        let a = &b * b.transpose() + DMatrix::identity(n, n) * 0.5;
        DMatrix::from_fn(n, n, |i, j| a[(p[i], p[j])])
    }

    #[test]
    fn triplets_merge_duplicates() {
        let a = CsrMatrix::from_triplets(2, 3, &[(1, 2, 1.0), (0, 0, 2.0), (1, 2, 0.5), (0, 1, -1.0)]);
        assert_eq!(a.nnz(), 3);
        assert_eq!(a.get(1, 2), 1.5);
        assert_eq!(a.get(0, 0), 2.0);
        assert_eq!(a.get(1, 1), 0.0);
        assert_eq!(a.mul_vec(&[1.0, 1.0, 2.0]), vec![1.0, 3.0]);
    }

    #[test]
    fn cholesky_matches_dense_solve() {
        let a = random_spd_banded(60, 4, 1);
        let csr = CsrMatrix::from_dense(&a);
        let chol = EnvelopeCholesky::factor(&csr).unwrap();
        let b: Vec<f64> = (0..60).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = chol.solve(&b);
        let oracle = a.clone().lu().solve(&nalgebra::DVector::from_vec(b)).unwrap();
        for i in 0..60 {
            assert!((x[i] - oracle[i]).abs() < 1e-10 * (1.0 + oracle[i].abs()));
        }
    }

    #[test]
    fn rcm_shrinks_envelope_of_scrambled_band() {
        let csr = CsrMatrix::from_dense(&random_spd_banded(120, 3, 2));
        let identity: Vec<usize> = (0..120).collect();
        let plain = EnvelopeCholesky::factor_with(&csr, identity).unwrap();
        let rcm = EnvelopeCholesky::factor(&csr).unwrap();
        assert!(rcm.envelope_size() * 2 < plain.envelope_size());
    }

    #[test]
    fn indefinite_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let err = EnvelopeCholesky::factor(&CsrMatrix::from_dense(&a)).unwrap_err();
        assert!(matches!(err, SparseError::NotPositiveDefinite { .. }));
    }

    #[test]
    fn principal_submatrix_picks_entries() {
        let a = DMatrix::from_fn(4, 4, |i, j| (10 * i + j) as f64);
        let sub = CsrMatrix::from_dense(&a).principal_submatrix(&[3, 1]);
        assert_eq!(sub.to_dense(), DMatrix::from_row_slice(2, 2, &[33.0, 31.0, 13.0, 11.0]));
    }

    proptest! {
        #[test]
        fn solve_residual_is_small(n in 2usize..40, band in 1usize..6, seed in 0u64..1000) {
            let a = random_spd_banded(n, band, seed);
            let csr = CsrMatrix::from_dense(&a);
            let chol = EnvelopeCholesky::factor(&csr).unwrap();
            let b: Vec<f64> = (0..n).map(|i| 1.0 + i as f64).collect();
            let x = chol.solve(&b);
            let r = csr.mul_vec(&x);
            for i in 0..n {
                prop_assert!((r[i] - b[i]).abs() < 1e-9 * (1.0 + b[i].abs()));
            }
        }

        #[test]
        fn rcm_is_a_permutation(n in 1usize..50, seed in 0u64..1000) {
            let csr = CsrMatrix::from_dense(&random_spd_banded(n, 2, seed));
            let mut p = rcm_ordering(&csr);
            p.sort_unstable();
            prop_assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
    }
}
