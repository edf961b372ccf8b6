//! Sparse symmetric Cholesky with the ordering / symbolic / numeric split.
//!
//! The sampler refactorizes the same sparsity pattern thousands of times with
//! different values (every Metropolis proposal for the dependence parameters,
//! every spatial-effect draw), so the work is split into three steps:
//!
//! 1. [`compute_ordering`] — a fill-reducing permutation (approximate minimum
//!    degree via the `amd` crate; deterministic for a fixed pattern);
//! 2. [`symbolic_factorize`] — elimination tree, factor pattern, and
//!    per-row elimination schedules, all value-independent;
//! 3. [`numeric_factorize`] — an up-looking `L·L′` factorization that walks
//!    the precomputed schedule with no structural decisions left to make.
//!
//! Steps 1–2 are cached in a [`SymbolicFactor`] and reused; step 3 is the
//! only per-iteration cost. A failed pivot is an *expected outcome* (the
//! Metropolis kernel treats boundary proposals as ordinary rejections), so
//! not-positive-definite is reported as a cheap `Err` value, never a panic.
//!
//! Permutation convention: `perm[k]` is the original index placed at
//! permuted position `k`, i.e. `(P·Q·P′)[r,c] = Q[perm[r], perm[c]]`, and
//! `P·Q·P′ = L·L′`. All public operations accept and return vectors in
//! original (unpermuted) order.

use std::sync::Arc;

use rand::{Rng, RngExt};
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::sparse::{SparsePrecision, SparsityPattern};

/// Pivot acceptance threshold, relative to the largest diagonal entry.
const PIVOT_RTOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CholError {
    /// Expected outcome for proposals outside the positive-definite region.
    #[error("matrix is not positive definite (pivot {pivot} failed)")]
    NotPositiveDefinite { pivot: usize },
    #[error("matrix pattern does not match the symbolic factorization")]
    PatternMismatch,
    #[error("vector length {got} does not match factor dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Fill-reducing ordering for a symmetric pattern.
///
/// Deterministic for a given pattern. Falls back to the natural order if the
/// ordering library rejects the input (never expected for valid patterns).
pub fn compute_ordering(pattern: &SparsityPattern) -> Vec<usize> {
    let n = pattern.dim();
    // No off-diagonal structure means no possible fill; keep natural order.
    if n <= 1 || pattern.nnz() <= n {
        return (0..n).collect();
    }
    match amd::order(n, pattern.colptr(), pattern.rowind(), &amd::Control::default()) {
        Ok((perm, _, _)) => perm,
        Err(status) => {
            log::warn!("amd ordering failed ({status:?}); using natural order");
            (0..n).collect()
        }
    }
}

#[derive(Debug, PartialEq)]
struct SymbolicInner {
    /// The full symmetric pattern this factorization was built for.
    pattern: Arc<SparsityPattern>,
    perm: Vec<usize>,
    iperm: Vec<usize>,
    /// Permuted upper-triangular pattern (CSC, rows sorted, diagonal last).
    bp: Vec<usize>,
    bi: Vec<usize>,
    /// Gather map: permuted-triangle value `t` reads `q.values()[src[t]]`.
    src: Vec<usize>,
    /// Elimination tree; `usize::MAX` marks a root.
    parent: Vec<usize>,
    /// Factor pattern (CSC, diagonal entry first in every column, then
    /// strictly-lower rows ascending).
    lp: Vec<usize>,
    li: Vec<usize>,
    /// Per-row elimination schedule: for permuted row `k`,
    /// `row_cols[row_start[k]..row_start[k+1]]` lists the columns of row `k`
    /// of `L` in ascending order and `row_tpos` the storage slot of each
    /// entry `(k, col)` in `li`/`lx`.
    row_start: Vec<usize>,
    row_cols: Vec<usize>,
    row_tpos: Vec<usize>,
}

/// Value-independent elimination structure, shareable across threads and
/// reusable for every matrix with the same pattern.
#[derive(Debug, Clone)]
pub struct SymbolicFactor {
    inner: Arc<SymbolicInner>,
}

impl PartialEq for SymbolicFactor {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.inner, &other.inner) || *self.inner == *other.inner
    }
}

/// Builds the elimination structure of `P·A·P′` for the given pattern.
///
/// `perm` must be a permutation of `[0, dim)`; the pattern must carry a
/// structural diagonal in every column (assembled precisions always do).
pub fn symbolic_factorize(pattern: &Arc<SparsityPattern>, perm: Vec<usize>) -> SymbolicFactor {
    let n = pattern.dim();
    assert_eq!(perm.len(), n, "permutation length mismatch");
    let mut iperm = vec![usize::MAX; n];
    for (k, &orig) in perm.iter().enumerate() {
        assert!(orig < n && iperm[orig] == usize::MAX, "invalid permutation");
        iperm[orig] = k;
    }

    // Permuted upper triangle: count, fill, sort columns, dedup-check.
    let cp = pattern.colptr();
    let ri = pattern.rowind();
    let mut counts = vec![0usize; n];
    for oc in 0..n {
        let pc = iperm[oc];
        for e in cp[oc]..cp[oc + 1] {
            let pr = iperm[ri[e]];
            if pr <= pc {
                counts[pc] += 1;
            }
        }
    }
    let mut bp = vec![0usize; n + 1];
    for c in 0..n {
        bp[c + 1] = bp[c] + counts[c];
    }
    let tnnz = bp[n];
    let mut bi = vec![0usize; tnnz];
    let mut src = vec![0usize; tnnz];
    let mut fill = bp.clone();
    for oc in 0..n {
        let pc = iperm[oc];
        for e in cp[oc]..cp[oc + 1] {
            let pr = iperm[ri[e]];
            if pr <= pc {
                let slot = fill[pc];
                fill[pc] += 1;
                bi[slot] = pr;
                src[slot] = e;
            }
        }
    }
    // Sort each column by row index, carrying the gather map along.
    let mut scratch: Vec<(usize, usize)> = Vec::new();
    for c in 0..n {
        let lo = bp[c];
        let hi = bp[c + 1];
        scratch.clear();
        scratch.extend(bi[lo..hi].iter().copied().zip(src[lo..hi].iter().copied()));
        scratch.sort_unstable();
        for (k, &(r, s)) in scratch.iter().enumerate() {
            bi[lo + k] = r;
            src[lo + k] = s;
        }
        assert!(
            hi > lo && bi[hi - 1] == c,
            "column {c} of the permuted pattern lacks a diagonal entry"
        );
    }

    // Elimination tree (Liu's algorithm with path compression).
    let mut parent = vec![usize::MAX; n];
    let mut ancestor = vec![usize::MAX; n];
    for k in 0..n {
        for e in bp[k]..bp[k + 1] {
            let mut i = bi[e];
            while i < k {
                let next = ancestor[i];
                ancestor[i] = k;
                if next == usize::MAX {
                    parent[i] = k;
                    break;
                }
                if next == k {
                    break;
                }
                i = next;
            }
        }
    }

    // Row patterns of L: reach of column k's entries through the etree.
    let mut mark = vec![usize::MAX; n];
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut lcount = vec![1usize; n]; // diagonal
    for k in 0..n {
        mark[k] = k;
        let row = &mut rows[k];
        for e in bp[k]..bp[k + 1] {
            let mut j = bi[e];
            while mark[j] != k {
                mark[j] = k;
                row.push(j);
                lcount[j] += 1;
                j = parent[j];
            }
        }
        row.sort_unstable();
    }

    // Static factor pattern plus each row entry's storage slot.
    let mut lp = vec![0usize; n + 1];
    for j in 0..n {
        lp[j + 1] = lp[j] + lcount[j];
    }
    let lnnz = lp[n];
    let mut li = vec![0usize; lnnz];
    let mut next = vec![0usize; n];
    for j in 0..n {
        li[lp[j]] = j;
        next[j] = lp[j] + 1;
    }
    let mut row_start = vec![0usize; n + 1];
    let mut row_cols = Vec::with_capacity(lnnz - n);
    let mut row_tpos = Vec::with_capacity(lnnz - n);
    for (k, row) in rows.iter().enumerate() {
        row_start[k + 1] = row_start[k] + row.len();
        for &j in row {
            let slot = next[j];
            next[j] += 1;
            li[slot] = k;
            row_cols.push(j);
            row_tpos.push(slot);
        }
    }

    SymbolicFactor {
        inner: Arc::new(SymbolicInner {
            pattern: Arc::clone(pattern),
            perm,
            iperm,
            bp,
            bi,
            src,
            parent,
            lp,
            li,
            row_start,
            row_cols,
            row_tpos,
        }),
    }
}

impl SymbolicFactor {
    /// Convenience: ordering + symbolic analysis in one call.
    pub fn analyze(q: &SparsePrecision) -> SymbolicFactor {
        let perm = compute_ordering(q.pattern());
        symbolic_factorize(q.pattern_arc(), perm)
    }

    pub fn dim(&self) -> usize {
        self.inner.perm.len()
    }

    pub fn perm(&self) -> &[usize] {
        &self.inner.perm
    }

    /// Nonzeros in the factor, diagonal included.
    pub fn l_nnz(&self) -> usize {
        self.inner.li.len()
    }

    /// Fill-in: factor nonzeros beyond the permuted lower triangle.
    pub fn fill_in(&self) -> usize {
        self.inner.li.len() - self.inner.bi.len()
    }

    fn matches(&self, q: &SparsePrecision) -> bool {
        Arc::ptr_eq(&self.inner.pattern, q.pattern_arc()) || *self.inner.pattern == *q.pattern()
    }
}

/// A numeric Cholesky factor `P·Q·P′ = L·L′` tied to its symbolic structure.
#[derive(Debug, Clone)]
pub struct CholFactor {
    symbolic: SymbolicFactor,
    lx: Vec<f64>,
}

/// Up-looking numeric factorization over the cached elimination structure.
///
/// Returns `Err(CholError::NotPositiveDefinite)` when a pivot falls at or
/// below `1e-12 ×` the largest diagonal entry — the rejection-sampling and
/// Metropolis callers consume this as an ordinary reject, not a failure.
pub fn numeric_factorize(
    symbolic: &SymbolicFactor,
    q: &SparsePrecision,
) -> Result<CholFactor, CholError> {
    if !symbolic.matches(q) {
        return Err(CholError::PatternMismatch);
    }
    let s = &*symbolic.inner;
    let n = q.dim();
    let qv = q.values();

    // Gather permuted upper-triangle values and the pivot tolerance.
    let mut av = vec![0.0; s.bi.len()];
    for (t, &e) in s.src.iter().enumerate() {
        av[t] = qv[e];
    }
    let mut max_diag = 0.0f64;
    for c in 0..n {
        max_diag = max_diag.max(av[s.bp[c + 1] - 1].abs());
    }
    let tol = PIVOT_RTOL * max_diag;

    let mut lx = vec![0.0; s.li.len()];
    let mut y = vec![0.0; n];
    for k in 0..n {
        // Scatter column k of the permuted triangle into the workspace.
        let (lo, hi) = (s.bp[k], s.bp[k + 1]);
        for e in lo..hi - 1 {
            y[s.bi[e]] = av[e];
        }
        let mut dk = av[hi - 1];

        // Sparse forward solve along row k's schedule (ascending columns).
        for idx in s.row_start[k]..s.row_start[k + 1] {
            let j = s.row_cols[idx];
            let t = s.row_tpos[idx];
            let yj = y[j];
            y[j] = 0.0;
            let lkj = yj / lx[s.lp[j]];
            let rows = &s.li[s.lp[j] + 1..t];
            let vals = &lx[s.lp[j] + 1..t];
            for (&r, &v) in rows.iter().zip(vals.iter()) {
                y[r] -= v * lkj;
            }
            lx[t] = lkj;
            dk -= lkj * lkj;
        }

        if !(dk > tol) {
            return Err(CholError::NotPositiveDefinite { pivot: k });
        }
        lx[s.lp[k]] = dk.sqrt();
    }

    Ok(CholFactor {
        symbolic: symbolic.clone(),
        lx,
    })
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.symbolic.dim()
    }

    pub fn symbolic(&self) -> &SymbolicFactor {
        &self.symbolic
    }

    /// `log det Q = 2·Σ log L_kk`.
    pub fn log_det(&self) -> f64 {
        let s = &*self.symbolic.inner;
        let mut acc = 0.0;
        for j in 0..self.dim() {
            acc += self.lx[s.lp[j]].ln();
        }
        2.0 * acc
    }

    /// Solves `Q·x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, CholError> {
        let n = self.dim();
        if rhs.len() != n {
            return Err(CholError::DimensionMismatch {
                expected: n,
                got: rhs.len(),
            });
        }
        let s = &*self.symbolic.inner;
        let mut w: Vec<f64> = (0..n).map(|k| rhs[s.perm[k]]).collect();
        self.forward(&mut w);
        self.backward(&mut w);
        let mut x = vec![0.0; n];
        for k in 0..n {
            x[s.perm[k]] = w[k];
        }
        Ok(x)
    }

    /// Draws `x ~ N(mean, Q⁻¹)` as `mean + P′·L^{−T}·z`, `z` i.i.d. standard
    /// normal.
    pub fn sample_gmrf<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(mean.len(), n);
        let s = &*self.symbolic.inner;
        let mut w: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        self.backward(&mut w);
        let mut x = mean.to_vec();
        for k in 0..n {
            x[s.perm[k]] += w[k];
        }
        x
    }

    /// `L′·P·v` — the inverse of the sampling transform. Centered GMRF
    /// samples whiten to unit covariance (returned in permuted order, which
    /// is immaterial for covariance checks).
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(v.len(), n);
        let s = &*self.symbolic.inner;
        let w: Vec<f64> = (0..n).map(|k| v[s.perm[k]]).collect();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut acc = self.lx[s.lp[j]] * w[j];
            for u in s.lp[j] + 1..s.lp[j + 1] {
                acc += self.lx[u] * w[s.li[u]];
            }
            out[j] = acc;
        }
        out
    }

    /// In-place `L·w = w` solve (permuted order).
    fn forward(&self, w: &mut [f64]) {
        let s = &*self.symbolic.inner;
        for j in 0..w.len() {
            let wj = w[j] / self.lx[s.lp[j]];
            w[j] = wj;
            for u in s.lp[j] + 1..s.lp[j + 1] {
                w[s.li[u]] -= self.lx[u] * wj;
            }
        }
    }

    /// In-place `L′·w = w` solve (permuted order).
    fn backward(&self, w: &mut [f64]) {
        let s = &*self.symbolic.inner;
        for j in (0..w.len()).rev() {
            let mut acc = w[j];
            for u in s.lp[j] + 1..s.lp[j + 1] {
                acc -= self.lx[u] * w[s.li[u]];
            }
            w[j] = acc / self.lx[s.lp[j]];
        }
    }

    /// Factor values, for structural tests.
    pub fn l_values(&self) -> &[f64] {
        &self.lx
    }

    /// Reconstructs `P·Q·P′ = L·L′` densely (row-major), for small oracles.
    pub fn reconstruct_permuted_dense(&self) -> Vec<f64> {
        let n = self.dim();
        let s = &*self.symbolic.inner;
        let mut out = vec![0.0; n * n];
        for a in 0..n {
            for ua in s.lp[a]..s.lp[a + 1] {
                let (ra, va) = (s.li[ua], self.lx[ua]);
                for ub in s.lp[a]..s.lp[a + 1] {
                    out[ra * n + s.li[ub]] += va * self.lx[ub];
                }
            }
        }
        out
    }
}
