//! Assembly of the joint sparse precision matrix of the multivariate MRF.
//!
//! The model is specified conditionally: component `(i, j)` — variable `j`
//! at location `i` — given everything else is Gaussian with mean
//!
//! ```text
//! μ_ij + Σ_{ℓ≠j} b_within(j,ℓ)·(y_iℓ − μ_iℓ)
//!      + Σ_{k∈N_i} Σ_ℓ b_cross(j,ℓ)·(y_kℓ − μ_kℓ)
//! ```
//!
//! and conditional variance τ_j², where `b_within(j,ℓ) = ρ_{jℓ}·τ_j/τ_ℓ`
//! and `b_cross(j,ℓ) = φ_{jℓ}·τ_j/τ_ℓ` (the within-layer coefficient is the
//! diagonal case φ_{jj}). Those choices make the implied joint precision
//! symmetric, which is exactly what [`assemble_precision`] builds:
//!
//! * diagonal block `(i,i)`: entry `(j,j) = 1/τ_j²`, entry
//!   `(j,ℓ) = −ρ_{jℓ}/(τ_j·τ_ℓ)` off the diagonal;
//! * for each lattice edge oriented `i > k`: block `(i,k)` has entry
//!   `(j,ℓ) = −φ_{jℓ}/(τ_j·τ_ℓ)` and block `(k,i)` is its transpose.
//!
//! Positive φ therefore means positive conditional dependence. Note the
//! asymmetry: φ_{jℓ} and φ_{ℓj} are distinct parameters, so the
//! cross-location block is not symmetric as a p×p matrix unless Φ is.

use std::sync::Arc;

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chol;
use crate::lattice::StackedLattice;
use crate::sparse::{SparsePrecision, SparsityPattern};

#[derive(Debug, Error)]
pub enum PrecisionError {
    #[error("parameter dimension p = {got} does not match lattice p = {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rho needs p(p-1)/2 = {expected} entries, got {got}")]
    RhoLength { expected: usize, got: usize },
    #[error("phi needs p*p = {expected} entries, got {got}")]
    PhiLength { expected: usize, got: usize },
    #[error("tau2[{j}] = {value} must be positive and finite")]
    InvalidTau2 { j: usize, value: f64 },
    #[error("within-location coefficient requires two distinct variables, got j = l = {j}")]
    WithinLocationSameVariable { j: usize },
    #[error("within-layer coefficient is per-variable, got j = {j}, l = {l}")]
    WithinLayerDistinctVariables { j: usize, l: usize },
    #[error("variable index {got} out of range (p = {p})")]
    VariableOutOfRange { got: usize, p: usize },
    #[error("no positive-definite draw found in {tries} rejection-sampling attempts")]
    RejectionSaturated { tries: usize },
}

/// Conditional-dependence parameters (ρ, Φ, τ²) of the stacked MRF.
///
/// ρ is symmetric with an undefined diagonal, so only the strict upper
/// triangle is stored (condensed, `(j,ℓ)` with `j < ℓ` in lexicographic
/// order); Φ is a full, generally asymmetric p×p matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DependenceParams {
    p: usize,
    rho: Vec<f64>,
    phi: Vec<f64>,
    tau2: Vec<f64>,
}

impl DependenceParams {
    /// `rho` condensed upper triangle (length p(p−1)/2), `phi` row-major
    /// (length p²), `tau2` positive (length p).
    pub fn new(
        p: usize,
        rho: Vec<f64>,
        phi: Vec<f64>,
        tau2: Vec<f64>,
    ) -> Result<Self, PrecisionError> {
        let want_rho = p * (p - 1) / 2;
        if rho.len() != want_rho {
            return Err(PrecisionError::RhoLength {
                expected: want_rho,
                got: rho.len(),
            });
        }
        if phi.len() != p * p {
            return Err(PrecisionError::PhiLength {
                expected: p * p,
                got: phi.len(),
            });
        }
        if tau2.len() != p {
            return Err(PrecisionError::DimensionMismatch {
                expected: p,
                got: tau2.len(),
            });
        }
        for (j, &t) in tau2.iter().enumerate() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(PrecisionError::InvalidTau2 { j, value: t });
            }
        }
        Ok(DependenceParams { p, rho, phi, tau2 })
    }

    /// All-zero dependence with the given conditional variances.
    pub fn zero(p: usize, tau2: Vec<f64>) -> Result<Self, PrecisionError> {
        DependenceParams::new(p, vec![0.0; p * (p - 1) / 2], vec![0.0; p * p], tau2)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Condensed index of the unordered pair `{j, ℓ}`, `j ≠ ℓ`.
    pub fn rho_index(&self, j: usize, l: usize) -> usize {
        let (a, b) = if j < l { (j, l) } else { (l, j) };
        debug_assert!(a < b && b < self.p);
        a * self.p - a * (a + 1) / 2 + (b - a - 1)
    }

    pub fn rho(&self, j: usize, l: usize) -> f64 {
        self.rho[self.rho_index(j, l)]
    }

    pub fn set_rho(&mut self, j: usize, l: usize, v: f64) {
        let idx = self.rho_index(j, l);
        self.rho[idx] = v;
    }

    pub fn phi(&self, j: usize, l: usize) -> f64 {
        debug_assert!(j < self.p && l < self.p);
        self.phi[j * self.p + l]
    }

    pub fn set_phi(&mut self, j: usize, l: usize, v: f64) {
        debug_assert!(j < self.p && l < self.p);
        self.phi[j * self.p + l] = v;
    }

    pub fn tau2(&self, j: usize) -> f64 {
        self.tau2[j]
    }

    pub fn set_tau2(&mut self, j: usize, v: f64) {
        assert!(v > 0.0 && v.is_finite(), "tau2 must stay positive");
        self.tau2[j] = v;
    }

    pub fn rho_slice(&self) -> &[f64] {
        &self.rho
    }

    pub fn phi_slice(&self) -> &[f64] {
        &self.phi
    }

    pub fn tau2_slice(&self) -> &[f64] {
        &self.tau2
    }
}

/// Which conditional-mean coefficient [`conditional_coefficient`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientKind {
    /// Same variable at a neighboring location: `b = φ_jj`.
    WithinLayer,
    /// Different variable at the same location: `b = ρ_jℓ·τ_j/τ_ℓ`.
    WithinLocation,
    /// Variable ℓ at a neighboring location entering variable j's
    /// conditional mean: `b = φ_jℓ·τ_j/τ_ℓ`.
    Cross,
}

/// Conditional-mean coefficient of the MRF specification.
pub fn conditional_coefficient(
    params: &DependenceParams,
    kind: CoefficientKind,
    j: usize,
    l: usize,
) -> Result<f64, PrecisionError> {
    let p = params.p();
    for &v in &[j, l] {
        if v >= p {
            return Err(PrecisionError::VariableOutOfRange { got: v, p });
        }
    }
    let tau_ratio = (params.tau2(j) / params.tau2(l)).sqrt();
    match kind {
        CoefficientKind::WithinLayer => {
            if j != l {
                return Err(PrecisionError::WithinLayerDistinctVariables { j, l });
            }
            Ok(params.phi(j, j))
        }
        CoefficientKind::WithinLocation => {
            if j == l {
                return Err(PrecisionError::WithinLocationSameVariable { j });
            }
            Ok(params.rho(j, l) * tau_ratio)
        }
        CoefficientKind::Cross => Ok(params.phi(j, l) * tau_ratio),
    }
}

/// Per-kind bounds of the uniform sampling box for (ρ, φ).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepBox {
    pub rho_min: f64,
    pub rho_max: f64,
    pub phi_min: f64,
    pub phi_max: f64,
}

impl Default for DepBox {
    fn default() -> Self {
        DepBox {
            rho_min: -0.3,
            rho_max: 0.3,
            phi_min: -0.3,
            phi_max: 0.3,
        }
    }
}

impl DepBox {
    pub fn contains(&self, params: &DependenceParams) -> bool {
        params
            .rho_slice()
            .iter()
            .all(|&r| r >= self.rho_min && r <= self.rho_max)
            && params
                .phi_slice()
                .iter()
                .all(|&f| f >= self.phi_min && f <= self.phi_max)
    }
}

#[derive(Debug, Clone, Copy)]
enum Recipe {
    /// `1/τ_j²`
    Diag(u16),
    /// `−ρ_{jℓ}/(τ_j·τ_ℓ)`
    Rho(u16, u16),
    /// `−φ_{jℓ}/(τ_j·τ_ℓ)`
    Phi(u16, u16),
}

/// Precomputed structure for repeated precision assembly on one lattice.
///
/// The sparsity pattern depends only on the lattice, so Metropolis proposals
/// can refill values onto a shared pattern without rebuilding structure —
/// and, because the pattern is shared by `Arc`, the Cholesky engine
/// recognizes every assembled matrix as matching its cached symbolic
/// factorization by pointer identity.
#[derive(Debug, Clone)]
pub struct PrecisionPattern {
    stacked: StackedLattice,
    pattern: Arc<SparsityPattern>,
    recipes: Vec<Recipe>,
}

impl PrecisionPattern {
    pub fn new(stacked: &StackedLattice) -> Self {
        let p = stacked.p();
        let n = stacked.n();
        let dim = stacked.dim();
        let grid = stacked.grid();

        let nnz = n * p + n * p * (p - 1) + 2 * grid.edge_count() * p * p;
        let mut colptr = Vec::with_capacity(dim + 1);
        let mut rowind = Vec::with_capacity(nnz);
        let mut recipes = Vec::with_capacity(nnz);

        colptr.push(0);
        for i in 0..n {
            let nbs = grid.neighbors(i);
            let below = nbs.partition_point(|&k| k < i);
            for l in 0..p {
                // Rows ascend: neighbor blocks k < i, own location, k > i.
                for &k in &nbs[..below] {
                    for j in 0..p {
                        rowind.push(k * p + j);
                        // Block (k, i) with k < i is the transposed edge
                        // block: entry (j, ℓ) carries φ_{ℓj}.
                        recipes.push(Recipe::Phi(l as u16, j as u16));
                    }
                }
                for j in 0..p {
                    rowind.push(i * p + j);
                    recipes.push(if j == l {
                        Recipe::Diag(j as u16)
                    } else {
                        Recipe::Rho(j as u16, l as u16)
                    });
                }
                for &k in &nbs[below..] {
                    for j in 0..p {
                        rowind.push(k * p + j);
                        // Block (k, i) with k > i: entry (j, ℓ) carries φ_{jℓ}.
                        recipes.push(Recipe::Phi(j as u16, l as u16));
                    }
                }
                colptr.push(rowind.len());
            }
        }
        debug_assert_eq!(rowind.len(), nnz);

        PrecisionPattern {
            stacked: stacked.clone(),
            pattern: Arc::new(SparsityPattern::new(dim, colptr, rowind)),
            recipes,
        }
    }

    pub fn stacked(&self) -> &StackedLattice {
        &self.stacked
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    /// Fills values for `params` onto the shared pattern.
    pub fn assemble(&self, params: &DependenceParams) -> Result<SparsePrecision, PrecisionError> {
        let p = self.stacked.p();
        if params.p() != p {
            return Err(PrecisionError::DimensionMismatch {
                expected: p,
                got: params.p(),
            });
        }
        for (j, &t) in params.tau2_slice().iter().enumerate() {
            if !(t > 0.0 && t.is_finite()) {
                return Err(PrecisionError::InvalidTau2 { j, value: t });
            }
        }

        // Fixed-order products keep the assembled matrix bitwise symmetric:
        // tprod[j][ℓ] and tprod[ℓ][j] multiply the same operands.
        let inv_tau: Vec<f64> = params.tau2_slice().iter().map(|t| 1.0 / t.sqrt()).collect();
        let mut tprod = vec![0.0; p * p];
        for j in 0..p {
            for l in 0..p {
                tprod[j * p + l] = inv_tau[j] * inv_tau[l];
            }
        }

        let values: Vec<f64> = self
            .recipes
            .iter()
            .map(|r| match *r {
                Recipe::Diag(j) => 1.0 / params.tau2(j as usize),
                Recipe::Rho(j, l) => {
                    -(params.rho(j as usize, l as usize) * tprod[j as usize * p + l as usize])
                }
                Recipe::Phi(j, l) => {
                    -(params.phi(j as usize, l as usize) * tprod[j as usize * p + l as usize])
                }
            })
            .collect();

        Ok(SparsePrecision::new(Arc::clone(&self.pattern), values)
            .expect("recipe count matches pattern"))
    }
}

/// One-shot assembly; see [`PrecisionPattern`] for the reusable form.
pub fn assemble_precision(
    stacked: &StackedLattice,
    params: &DependenceParams,
) -> Result<SparsePrecision, PrecisionError> {
    PrecisionPattern::new(stacked).assemble(params)
}

/// True iff the sparse Cholesky factorization of `Q` succeeds with every
/// pivot above tolerance. Failure to factorize *is* the `false` return.
pub fn check_positive_definite(q: &SparsePrecision) -> bool {
    let perm = chol::compute_ordering(q.pattern());
    let symbolic = chol::symbolic_factorize(q.pattern_arc(), perm);
    chol::numeric_factorize(&symbolic, q).is_ok()
}

/// Draws (ρ, φ) uniformly from `bounds`, keeping the first draw whose
/// assembled precision is positive-definite; τ² is held at `tau2` during
/// validity testing, mirroring the rejection-sampling prior.
pub fn sample_valid_params_uniform<R: Rng + ?Sized>(
    stacked: &StackedLattice,
    rng: &mut R,
    bounds: &DepBox,
    tau2: &[f64],
    max_tries: usize,
) -> Result<DependenceParams, PrecisionError> {
    let p = stacked.p();
    let pattern = PrecisionPattern::new(stacked);
    let perm = chol::compute_ordering(pattern.pattern());
    let symbolic = chol::symbolic_factorize(pattern.pattern(), perm);

    let mut params = DependenceParams::zero(p, tau2.to_vec())?;
    for _ in 0..max_tries {
        for a in 0..p {
            for b in (a + 1)..p {
                params.set_rho(a, b, rng.random_range(bounds.rho_min..=bounds.rho_max));
            }
        }
        for a in 0..p {
            for b in 0..p {
                params.set_phi(a, b, rng.random_range(bounds.phi_min..=bounds.phi_max));
            }
        }
        let q = pattern.assemble(&params)?;
        if chol::numeric_factorize(&symbolic, &q).is_ok() {
            return Ok(params);
        }
    }
    Err(PrecisionError::RejectionSaturated { tries: max_tries })
}
