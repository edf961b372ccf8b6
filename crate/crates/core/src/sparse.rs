//! Symmetric sparse matrices in compressed-sparse-column form.
//!
//! Both triangles are stored explicitly (the assembly guarantees exact
//! symmetry), with row indices sorted within every column. The structure
//! lives in a shared [`SparsityPattern`] behind an `Arc`: the Metropolis
//! proposals of the sampler re-assemble values thousands of times onto the
//! same pattern, and the Cholesky engine uses pointer identity of the
//! pattern as a fast path when checking that a matrix matches its symbolic
//! factorization.

use std::io::{self, Write};
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SparseError {
    #[error("value slice length {got} does not match pattern nonzero count {expected}")]
    ValueLength { got: usize, expected: usize },
    #[error("vector length {got} does not match matrix dimension {expected}")]
    VectorLength { got: usize, expected: usize },
    #[error("column {col} has no structural diagonal entry")]
    MissingDiagonal { col: usize },
}

/// Immutable sparsity structure: dimension, column pointers, sorted row
/// indices per column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    dim: usize,
    colptr: Vec<usize>,
    rowind: Vec<usize>,
}

impl SparsityPattern {
    /// Builds a pattern from raw CSC structure. Row indices must be sorted
    /// and in-range within every column; this is asserted in debug builds.
    pub fn new(dim: usize, colptr: Vec<usize>, rowind: Vec<usize>) -> Self {
        debug_assert_eq!(colptr.len(), dim + 1);
        debug_assert_eq!(*colptr.last().unwrap_or(&0), rowind.len());
        #[cfg(debug_assertions)]
        for c in 0..dim {
            let col = &rowind[colptr[c]..colptr[c + 1]];
            debug_assert!(col.windows(2).all(|w| w[0] < w[1]), "unsorted column {c}");
            debug_assert!(col.iter().all(|&r| r < dim));
        }
        SparsityPattern {
            dim,
            colptr,
            rowind,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.rowind.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowind(&self) -> &[usize] {
        &self.rowind
    }

    /// Sorted row indices of column `c`.
    pub fn col(&self, c: usize) -> &[usize] {
        &self.rowind[self.colptr[c]..self.colptr[c + 1]]
    }

    /// Position of entry `(r, c)` in the value array, if structurally present.
    pub fn find(&self, r: usize, c: usize) -> Option<usize> {
        let lo = self.colptr[c];
        self.col(c).binary_search(&r).ok().map(|k| lo + k)
    }
}

/// A symmetric sparse matrix: shared pattern plus one value per stored entry.
#[derive(Debug, Clone)]
pub struct SparsePrecision {
    pattern: Arc<SparsityPattern>,
    values: Vec<f64>,
}

impl SparsePrecision {
    pub fn new(pattern: Arc<SparsityPattern>, values: Vec<f64>) -> Result<Self, SparseError> {
        if values.len() != pattern.nnz() {
            return Err(SparseError::ValueLength {
                got: values.len(),
                expected: pattern.nnz(),
            });
        }
        Ok(SparsePrecision { pattern, values })
    }

    pub fn dim(&self) -> usize {
        self.pattern.dim()
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn pattern_arc(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Same pattern, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, SparseError> {
        SparsePrecision::new(Arc::clone(&self.pattern), values)
    }

    /// Entry `(r, c)`, zero if structurally absent.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pattern.find(r, c).map_or(0.0, |k| self.values[k])
    }

    /// `self + diag(d)` on the shared pattern. Every column must carry a
    /// structural diagonal entry (always true for assembled precisions).
    pub fn add_diagonal(&self, d: &[f64]) -> Result<Self, SparseError> {
        if d.len() != self.dim() {
            return Err(SparseError::VectorLength {
                got: d.len(),
                expected: self.dim(),
            });
        }
        let mut values = self.values.clone();
        for c in 0..self.dim() {
            let k = self
                .pattern
                .find(c, c)
                .ok_or(SparseError::MissingDiagonal { col: c })?;
            values[k] += d[c];
        }
        self.with_values(values)
    }

    /// `c · self` on the shared pattern.
    pub fn scaled(&self, c: f64) -> Self {
        SparsePrecision {
            pattern: Arc::clone(&self.pattern),
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    /// `y = Q·x`.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.dim());
        assert_eq!(y.len(), self.dim());
        y.fill(0.0);
        let cp = self.pattern.colptr();
        let ri = self.pattern.rowind();
        for c in 0..self.dim() {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for e in cp[c]..cp[c + 1] {
                y[ri[e]] += self.values[e] * xc;
            }
        }
    }

    /// Quadratic form `v′·Q·v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        assert_eq!(v.len(), self.dim());
        let cp = self.pattern.colptr();
        let ri = self.pattern.rowind();
        let mut acc = 0.0;
        for c in 0..self.dim() {
            let vc = v[c];
            if vc == 0.0 {
                continue;
            }
            let mut col_acc = 0.0;
            for e in cp[c]..cp[c + 1] {
                col_acc += self.values[e] * v[ri[e]];
            }
            acc += vc * col_acc;
        }
        acc
    }

    /// Dense row-major copy, for small-instance oracles.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let mut dense = vec![0.0; n * n];
        let cp = self.pattern.colptr();
        let ri = self.pattern.rowind();
        for c in 0..n {
            for e in cp[c]..cp[c + 1] {
                dense[ri[e] * n + c] = self.values[e];
            }
        }
        dense
    }

    /// Dumps the matrix as `row col value` lines (one per stored entry,
    /// column-major order), for comparison against external oracles.
    pub fn write_coo<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let cp = self.pattern.colptr();
        let ri = self.pattern.rowind();
        for c in 0..self.dim() {
            for e in cp[c]..cp[c + 1] {
                writeln!(w, "{} {} {}", ri[e], c, self.values[e])?;
            }
        }
        Ok(())
    }
}
