use crate::error::{dim, Error, Result};
use crate::numeric::Tensor2;

/// Compressed-sparse-row matrix. Square instances double as graph adjacency.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

/// Weighted adjacency over `n` nodes; entries are stored row-sorted.
pub type SparseAdj = SparseMatrix;

impl SparseMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_ptr: vec![0; rows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Square `n x n` matrix from `(row, col, weight)` triplets in any order.
    pub fn from_triplets(n: usize, entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        Self::from_triplets_rect(n, n, entries)
    }

    /// Builds a matrix from triplets; duplicates, out-of-range indices and
    /// non-finite weights are rejected.
    pub fn from_triplets_rect(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut prev: Option<(usize, usize)> = None;
        for &(r, c, w) in &entries {
            if r >= rows || c >= cols {
                return Err(dim("sparse", format!("entry ({r},{c}) outside {rows}x{cols}")));
            }
            if prev == Some((r, c)) {
                return Err(Error::Parameter(format!("duplicate sparse entry ({r},{c})")));
            }
            if !w.is_finite() {
                return Err(Error::NumericDomain { op: "sparse", detail: format!("weight at ({r},{c}) is {w}") });
            }
            prev = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c);
            values.push(w);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        Ok(Self { rows, cols, row_ptr, col_idx, values })
    }

    /// Sparse copy of the nonzero entries of a dense matrix.
    pub fn from_dense(t: &Tensor2) -> Self {
        let mut row_ptr = Vec::with_capacity(t.rows() + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..t.rows() {
            for (c, &v) in t.row(r).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { rows: t.rows(), cols: t.cols(), row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.rows
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    /// `(col, weight)` pairs stored in row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn row_len(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    /// All stored entries in row-sorted order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.rows).flat_map(move |r| self.row(r).map(move |(c, w)| (r, c, w)))
    }

    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].binary_search(&c).ok().map(|k| self.values[span.start + k])
    }

    pub fn to_dense(&self) -> Tensor2 {
        let mut t = Tensor2::zeros(self.rows, self.cols);
        for (r, c, w) in self.entries() {
            t.set(r, c, w);
        }
        t
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for c in 0..self.cols {
            counts[c + 1] += counts[c];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for (r, c, w) in self.entries() {
            let slot = next[c];
            col_idx[slot] = r;
            values[slot] = w;
            next[c] += 1;
        }
        Self { rows: self.cols, cols: self.rows, row_ptr: counts, col_idx, values }
    }

    pub fn is_symmetric(&self) -> bool {
        self.rows == self.cols && self.entries().all(|(r, c, w)| self.get(c, r) == Some(w))
    }

    /// Same sparsity pattern with every weight set to one.
    pub fn pattern(&self) -> Self {
        Self { values: vec![1.0; self.nnz()], ..self.clone() }
    }

    /// Pattern with the diagonal added (weights ignored).
    pub fn with_self_loops(&self) -> Self {
        let mut entries: Vec<(usize, usize, f64)> =
            self.entries().filter(|&(r, c, _)| r != c).map(|(r, c, _)| (r, c, 1.0)).collect();
        entries.extend((0..self.rows.min(self.cols)).map(|i| (i, i, 1.0)));
        Self::from_triplets_rect(self.rows, self.cols, entries).expect("deduplicated pattern")
    }

    /// Rows zeroed where `keep[r]` is false.
    pub fn mask_rows(&self, keep: &[bool]) -> Self {
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for r in 0..self.rows {
            if keep[r] {
                for (c, w) in self.row(r) {
                    col_idx.push(c);
                    values.push(w);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self { rows: self.rows, cols: self.cols, row_ptr, col_idx, values }
    }

    /// Sparse-dense product `self * x`.
    pub fn spmm(&self, x: &Tensor2) -> Result<Tensor2> {
        if self.cols != x.rows() {
            return Err(dim("spmm", format!("{}x{} times {}x{}", self.rows, self.cols, x.rows(), x.cols())));
        }
        let d = x.cols();
        let mut out = Tensor2::zeros(self.rows, d);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            for (c, w) in self.row(r) {
                for (o, &v) in dst.iter_mut().zip(x.row(c)) {
                    *o += w * v;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * g` without materializing the transpose.
    pub fn spmm_transposed(&self, g: &Tensor2) -> Tensor2 {
        debug_assert_eq!(self.rows, g.rows());
        let d = g.cols();
        let mut out = Tensor2::zeros(self.cols, d);
        for r in 0..self.rows {
            let src = g.row(r);
            for (c, w) in self.row(r) {
                for (o, &v) in out.row_mut(c).iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        out
    }
}
