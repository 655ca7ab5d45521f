use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

/// Compressed sparse row matrix.
///
/// Column indices are strictly increasing within a row and every stored
/// value is finite. Explicit zeros may be stored; they are part of the
/// sparsity pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_offsets: vec![0; n_rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Builds from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let m = Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        };
        m.validate()?;
        Ok(m)
    }

    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); n_rows];
        for (r, c, v) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::shape(
                    "SparseMatrix::from_triplets",
                    format!("entry ({r}, {c}) outside {n_rows}x{n_cols}"),
                ));
            }
            *rows[r].entry(c).or_insert(0.0) += v;
        }
        Self::from_row_maps(n_cols, rows)
    }

    pub(crate) fn from_row_maps(n_cols: usize, rows: Vec<BTreeMap<usize, f64>>) -> Result<Self> {
        let n_rows = rows.len();
        let mut row_offsets = Vec::with_capacity(n_rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for row in rows {
            for (c, v) in row {
                col_indices.push(c);
                values.push(v);
            }
            row_offsets.push(col_indices.len());
        }
        Self::from_csr(n_rows, n_cols, row_offsets, col_indices, values)
    }

    pub fn from_dense(dense: &DenseMatrix) -> Self {
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for r in 0..dense.n_rows() {
            for (c, &v) in dense.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_indices.push(c);
                    values.push(v);
                }
            }
            row_offsets.push(col_indices.len());
        }
        Self {
            n_rows: dense.n_rows(),
            n_cols: dense.n_cols(),
            row_offsets,
            col_indices,
            values,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::shape("SparseMatrix", d));
        if self.row_offsets.len() != self.n_rows + 1 {
            return bad(format!(
                "row_offsets has length {}, expected {}",
                self.row_offsets.len(),
                self.n_rows + 1
            ));
        }
        if self.row_offsets[0] != 0 || *self.row_offsets.last().unwrap() != self.values.len() {
            return bad("row_offsets must start at 0 and end at nnz".into());
        }
        if self.col_indices.len() != self.values.len() {
            return bad("col_indices and values differ in length".into());
        }
        for w in self.row_offsets.windows(2) {
            if w[0] > w[1] {
                return bad("row_offsets must be non-decreasing".into());
            }
        }
        for r in 0..self.n_rows {
            let (cols, _) = self.row(r);
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {r} columns not strictly increasing"));
            }
            if cols.last().is_some_and(|&c| c >= self.n_cols) {
                return bad(format!("row {r} has a column index >= {}", self.n_cols));
            }
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return bad("non-finite stored value".into());
        }
        Ok(())
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `r`.
    #[inline]
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[a..b], &self.values[a..b])
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_offsets[r + 1] - self.row_offsets[r]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |k| vals[k])
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &v)| (r, c, v))
        })
    }

    /// Rows with at least one stored entry.
    pub fn nonempty_rows(&self) -> Vec<usize> {
        (0..self.n_rows).filter(|&r| self.row_nnz(r) > 0).collect()
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for (r, c, v) in self.iter() {
            out.set(r, c, v);
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); self.n_cols];
        for (r, c, v) in self.iter() {
            rows[c].insert(r, v);
        }
        Self::from_row_maps(self.n_rows, rows).expect("transpose of a valid matrix is valid")
    }

    /// Sparse times dense: `self · right`.
    pub fn spmm(&self, right: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_cols != right.n_rows() {
            return Err(Error::shape(
                "spmm",
                format!(
                    "{}x{} sparse times {:?} dense",
                    self.n_rows,
                    self.n_cols,
                    right.shape()
                ),
            ));
        }
        let mut out = DenseMatrix::zeros(self.n_rows, right.n_cols());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            if cols.is_empty() {
                continue;
            }
            let out_row = out.row_mut(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &x) in out_row.iter_mut().zip(right.row(c)) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// Transposed sparse times dense: `selfᵀ · right`, scattering row by row.
    pub fn t_spmm(&self, right: &DenseMatrix) -> Result<DenseMatrix> {
        if self.n_rows != right.n_rows() {
            return Err(Error::shape(
                "t_spmm",
                format!(
                    "({}x{} sparse)ᵀ times {:?} dense",
                    self.n_rows,
                    self.n_cols,
                    right.shape()
                ),
            ));
        }
        let mut out = DenseMatrix::zeros(self.n_cols, right.n_cols());
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            let src = right.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                for (o, &x) in out.row_mut(c).iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// Keeps only the listed rows (others become empty).
    pub fn restrict_rows(&self, rows: &[usize]) -> Self {
        let mut keep = vec![false; self.n_rows];
        for &r in rows {
            keep[r] = true;
        }
        let mut row_offsets = vec![0];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for (r, &k) in keep.iter().enumerate() {
            if k {
                let (cols, vals) = self.row(r);
                col_indices.extend_from_slice(cols);
                values.extend_from_slice(vals);
            }
            row_offsets.push(col_indices.len());
        }
        Self {
            n_rows: self.n_rows,
            n_cols: self.n_cols,
            row_offsets,
            col_indices,
            values,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_broken_invariants() {
        assert!(SparseMatrix::from_csr(2, 2, vec![0, 1], vec![0], vec![1.0]).is_err());
        assert!(SparseMatrix::from_csr(1, 2, vec![0, 2], vec![1, 0], vec![1.0, 1.0]).is_err());
        assert!(SparseMatrix::from_csr(1, 2, vec![0, 1], vec![2], vec![1.0]).is_err());
        assert!(SparseMatrix::from_csr(1, 2, vec![0, 1], vec![0], vec![f64::INFINITY]).is_err());
        assert!(SparseMatrix::from_csr(2, 2, vec![0, 1, 1], vec![1], vec![2.0]).is_ok());
    }

    #[test]
    fn identity_spmm_is_identity() {
        let x = DenseMatrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 - 2.5);
        assert_eq!(SparseMatrix::identity(4).spmm(&x).unwrap(), x);
    }

    #[test]
    fn empty_row_gives_zero_row() {
        let s = SparseMatrix::from_triplets(3, 3, [(0, 1, 2.0), (2, 0, -1.0)]).unwrap();
        let x = DenseMatrix::from_fn(3, 2, |r, c| 1.0 + r as f64 + c as f64);
        let y = s.spmm(&x).unwrap();
        assert_eq!(y.row(1), &[0.0, 0.0]);
        assert_eq!(y.row(0), &[4.0, 6.0]);
    }

    #[test]
    fn spmm_shape_error() {
        let s = SparseMatrix::identity(3);
        assert!(matches!(
            s.spmm(&DenseMatrix::zeros(2, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn t_spmm_matches_transpose() {
        let s =
            SparseMatrix::from_triplets(3, 4, [(0, 1, 2.0), (1, 3, 0.5), (2, 1, -1.0)]).unwrap();
        let x = DenseMatrix::from_fn(3, 2, |r, c| (r + 2 * c) as f64);
        assert_eq!(s.t_spmm(&x).unwrap(), s.transpose().spmm(&x).unwrap());
    }

    #[test]
    fn duplicate_triplets_are_summed() {
        let s = SparseMatrix::from_triplets(2, 2, [(0, 0, 1.0), (0, 0, 2.0)]).unwrap();
        assert_eq!(s.get(0, 0), 3.0);
        assert_eq!(s.nnz(), 1);
    }
}
