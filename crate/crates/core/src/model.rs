//! Three-level hierarchical model for gridded multi-member ensembles.
//!
//! Level one models each member's field for each variable as Gaussian noise
//! around a member-specific regression surface plus a member-specific
//! spatial effect; level two ties the member coefficients and spatial
//! effects to ensemble-level means, with the spatial effects sharing the
//! multivariate-MRF precision of [`crate::precision`]; level three places
//! weakly informative priors on everything else. All state vectors follow
//! the location-major stacking of [`crate::lattice::StackedLattice`].
//!
//! Every Gaussian block has a closed-form full conditional, exposed here as
//! an exact conjugate draw; the dependence parameters (ρ, Φ, τ²) are
//! non-conjugate and enter through [`log_posterior_dep`], which the sampler
//! consumes in Metropolis ratios. Layouts: `y[(r·p + j)·n + i]` holds member
//! `r`, variable `j`, location `i`; coefficient blocks are row-major per
//! variable; spatial effects are flat location-major vectors.

use rand::{Rng, RngExt};
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chol::{numeric_factorize, CholError, CholFactor, SymbolicFactor};
use crate::dense::{design_t_vec, gram, DenseChol, DenseError};
use crate::lattice::StackedLattice;
use crate::precision::{
    sample_valid_params_uniform, DepBox, DependenceParams, PrecisionError, PrecisionPattern,
};
use crate::sparse::{SparseError, SparsePrecision};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("{what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("zero residual sum for {what}: the scale-free variance prior gives a degenerate draw")]
    DegenerateResidual { what: &'static str },
    #[error("prior draws require proper variance hyperparameters (sigma2_shape0, sigma2_rate0 > 0)")]
    ImproperPrior,
    #[error("dense conditional system: {0}")]
    Dense(#[from] DenseError),
    #[error("sparse conditional system: {0}")]
    Sparse(#[from] SparseError),
    #[error("spatial-effect factorization: {0}")]
    Factorization(#[from] CholError),
    #[error("dependence parameters: {0}")]
    Dependence(#[from] PrecisionError),
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A gridded multi-member ensemble: `m` members of `p` variables observed at
/// every location of a stacked lattice, with fixed-effect covariates `X1`
/// (n×q₁, one row per location) and random-effect covariates `X2` (n×q₂,
/// default a single intercept column).
#[derive(Debug, Clone)]
pub struct EnsembleDataset {
    lattice: StackedLattice,
    m: usize,
    q1: usize,
    q2: usize,
    y: Vec<f64>,
    x1: Vec<f64>,
    x2: Vec<f64>,
    x1tx1: Vec<f64>,
    x2tx2: Vec<f64>,
}

impl EnsembleDataset {
    pub fn new(
        lattice: StackedLattice,
        m: usize,
        y: Vec<f64>,
        x1: Vec<f64>,
        q1: usize,
        x2: Vec<f64>,
        q2: usize,
    ) -> Result<Self, ModelError> {
        let n = lattice.grid().n();
        let p = lattice.p();
        if m == 0 {
            return Err(ModelError::NonPositive {
                what: "ensemble size m",
                value: 0.0,
            });
        }
        if q1 == 0 || q2 == 0 {
            return Err(ModelError::NonPositive {
                what: "design column count",
                value: 0.0,
            });
        }
        check_len("y", &y, m * p * n)?;
        check_len("x1", &x1, n * q1)?;
        check_len("x2", &x2, n * q2)?;
        check_finite("y", &y)?;
        check_finite("x1", &x1)?;
        check_finite("x2", &x2)?;
        let x1tx1 = gram(&x1, n, q1);
        let x2tx2 = gram(&x2, n, q2);
        Ok(EnsembleDataset {
            lattice,
            m,
            q1,
            q2,
            y,
            x1,
            x2,
            x1tx1,
            x2tx2,
        })
    }

    pub fn lattice(&self) -> &StackedLattice {
        &self.lattice
    }

    /// Number of ensemble members.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of grid locations.
    pub fn n(&self) -> usize {
        self.lattice.grid().n()
    }

    /// Number of variables per location.
    pub fn p(&self) -> usize {
        self.lattice.p()
    }

    pub fn q1(&self) -> usize {
        self.q1
    }

    pub fn q2(&self) -> usize {
        self.q2
    }

    /// Response vector of member `r`, variable `j` (length n).
    pub fn y_rj(&self, r: usize, j: usize) -> &[f64] {
        let n = self.n();
        let start = (r * self.p() + j) * n;
        &self.y[start..start + n]
    }

    /// Full response storage, `[(r·p + j)·n + i]`.
    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Replaces the responses in place (used by the generative checks).
    pub fn set_y(&mut self, y: Vec<f64>) -> Result<(), ModelError> {
        check_len("y", &y, self.y.len())?;
        check_finite("y", &y)?;
        self.y = y;
        Ok(())
    }

    /// Fixed-effect design, row-major n×q₁.
    pub fn x1(&self) -> &[f64] {
        &self.x1
    }

    /// Random-effect design, row-major n×q₂.
    pub fn x2(&self) -> &[f64] {
        &self.x2
    }

    pub fn x1_row(&self, i: usize) -> &[f64] {
        &self.x1[i * self.q1..(i + 1) * self.q1]
    }

    pub fn x2_row(&self, i: usize) -> &[f64] {
        &self.x2[i * self.q2..(i + 1) * self.q2]
    }

    /// Cached Gram matrix X1′X1 (q₁×q₁ row-major).
    pub fn x1tx1(&self) -> &[f64] {
        &self.x1tx1
    }

    /// Cached Gram matrix X2′X2 (q₂×q₂ row-major).
    pub fn x2tx2(&self) -> &[f64] {
        &self.x2tx2
    }
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<(), ModelError> {
    if v.len() != expected {
        return Err(ModelError::DimensionMismatch {
            what,
            got: v.len(),
            expected,
        });
    }
    Ok(())
}

fn check_finite(what: &'static str, v: &[f64]) -> Result<(), ModelError> {
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(ModelError::NonFinite { what, index });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// State and priors
// ---------------------------------------------------------------------------

/// The full parameter state of one chain.
///
/// Layouts: `alpha[j·q₁ + c]`, `beta_r[(r·p + j)·q₂ + c]`, `beta_bar[j·q₂ + c]`,
/// `h_r[r·dim + a]` and `h_bar[a]` with `a = flat(i, j)` location-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub alpha: Vec<f64>,
    pub beta_r: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub h_r: Vec<f64>,
    pub h_bar: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub sigma2_b: f64,
    pub dep: DependenceParams,
}

impl ModelState {
    /// All-zero coefficients and spatial effects, unit variances, and the
    /// supplied dependence parameters.
    pub fn init(data: &EnsembleDataset, dep: DependenceParams) -> Self {
        let (m, p, dim) = (data.m(), data.p(), data.lattice().dim());
        ModelState {
            alpha: vec![0.0; p * data.q1()],
            beta_r: vec![0.0; m * p * data.q2()],
            beta_bar: vec![0.0; p * data.q2()],
            h_r: vec![0.0; m * dim],
            h_bar: vec![0.0; dim],
            sigma2: vec![1.0; p],
            sigma2_b: 1.0,
            dep,
        }
    }

    /// Checks dimensions against the dataset and positivity of variances.
    pub fn validate(&self, data: &EnsembleDataset) -> Result<(), ModelError> {
        let (m, p, dim) = (data.m(), data.p(), data.lattice().dim());
        check_len("alpha", &self.alpha, p * data.q1())?;
        check_len("beta_r", &self.beta_r, m * p * data.q2())?;
        check_len("beta_bar", &self.beta_bar, p * data.q2())?;
        check_len("h_r", &self.h_r, m * dim)?;
        check_len("h_bar", &self.h_bar, dim)?;
        check_len("sigma2", &self.sigma2, p)?;
        for (j, &s) in self.sigma2.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                let _ = j;
                return Err(ModelError::NonPositive {
                    what: "sigma2",
                    value: s,
                });
            }
        }
        if !(self.sigma2_b > 0.0 && self.sigma2_b.is_finite()) {
            return Err(ModelError::NonPositive {
                what: "sigma2_b",
                value: self.sigma2_b,
            });
        }
        if self.dep.p() != p {
            return Err(ModelError::DimensionMismatch {
                what: "dep.p",
                got: self.dep.p(),
                expected: p,
            });
        }
        Ok(())
    }

    pub fn alpha_j(&self, j: usize, q1: usize) -> &[f64] {
        &self.alpha[j * q1..(j + 1) * q1]
    }

    pub fn beta_rj(&self, r: usize, j: usize, p: usize, q2: usize) -> &[f64] {
        let start = (r * p + j) * q2;
        &self.beta_r[start..start + q2]
    }

    pub fn beta_bar_j(&self, j: usize, q2: usize) -> &[f64] {
        &self.beta_bar[j * q2..(j + 1) * q2]
    }

    pub fn h_r_slice(&self, r: usize, dim: usize) -> &[f64] {
        &self.h_r[r * dim..(r + 1) * dim]
    }
}

/// Hyperparameters of the third level.
///
/// `sigma2_shape0 = sigma2_rate0 = 0` selects the scale-free prior
/// P(σ²) ∝ 1/σ² for both the data variances and the random-coefficient
/// variance; positive values give a proper inverse-gamma, which the
/// joint-consistency tests require. The prior for each log τ_j² is uniform
/// on `[log_tau2_min, log_tau2_max]`, and (ρ, Φ) are uniform on the
/// intersection of `dep_box` with the positive-definite region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub sigma2_alpha: f64,
    pub sigma2_beta: f64,
    pub sigma2_h: f64,
    pub dep_box: DepBox,
    pub sigma2_shape0: f64,
    pub sigma2_rate0: f64,
    pub log_tau2_min: f64,
    pub log_tau2_max: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            sigma2_alpha: 10.0,
            sigma2_beta: 100.0,
            sigma2_h: 10.0,
            dep_box: DepBox::default(),
            sigma2_shape0: 0.0,
            sigma2_rate0: 0.0,
            log_tau2_min: -10.0,
            log_tau2_max: 10.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        for (what, v) in [
            ("sigma2_alpha", self.sigma2_alpha),
            ("sigma2_beta", self.sigma2_beta),
            ("sigma2_h", self.sigma2_h),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ModelError::NonPositive { what, value: v });
            }
        }
        if self.sigma2_shape0 < 0.0 || self.sigma2_rate0 < 0.0 {
            return Err(ModelError::NonPositive {
                what: "sigma2_shape0/rate0",
                value: self.sigma2_shape0.min(self.sigma2_rate0),
            });
        }
        if !(self.log_tau2_min < self.log_tau2_max) {
            return Err(ModelError::NonPositive {
                what: "log_tau2 range width",
                value: self.log_tau2_max - self.log_tau2_min,
            });
        }
        if !(self.dep_box.rho_min <= self.dep_box.rho_max
            && self.dep_box.phi_min <= self.dep_box.phi_max)
        {
            return Err(ModelError::NonPositive {
                what: "dep_box width",
                value: -1.0,
            });
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Likelihood
// ---------------------------------------------------------------------------

const LN_2PI: f64 = 1.8378770664093453;

/// Fitted regression surface X1·α_j + X2·β_rj at every location.
fn fitted_into(data: &EnsembleDataset, alpha_j: &[f64], beta_rj: &[f64], out: &mut [f64]) {
    let n = data.n();
    for i in 0..n {
        let mut v = 0.0;
        for (x, a) in data.x1_row(i).iter().zip(alpha_j) {
            v += x * a;
        }
        for (x, b) in data.x2_row(i).iter().zip(beta_rj) {
            v += x * b;
        }
        out[i] = v;
    }
}

/// Residual y_rj − X1·α_j − X2·β_rj − h_rj (length n); `with_h` controls
/// whether the spatial effect is subtracted.
fn residual_into(
    data: &EnsembleDataset,
    state: &ModelState,
    r: usize,
    j: usize,
    with_h: bool,
    out: &mut [f64],
) {
    let (n, p, q1, q2) = (data.n(), data.p(), data.q1(), data.q2());
    fitted_into(
        data,
        state.alpha_j(j, q1),
        state.beta_rj(r, j, p, q2),
        out,
    );
    let y = data.y_rj(r, j);
    let h = state.h_r_slice(r, data.lattice().dim());
    for i in 0..n {
        out[i] = y[i] - out[i];
        if with_h {
            out[i] -= h[i * p + j];
        }
    }
}

/// Gaussian log-likelihood Σ_{r,j} log N(y_rj ; X1α_j + X2β_rj + h_rj, σ_j²I).
pub fn log_likelihood(data: &EnsembleDataset, state: &ModelState) -> Result<f64, ModelError> {
    state.validate(data)?;
    let (m, n, p) = (data.m(), data.n(), data.p());
    let mut resid = vec![0.0; n];
    let mut total = 0.0;
    for j in 0..p {
        let s2 = state.sigma2[j];
        let mut ss = 0.0;
        for r in 0..m {
            residual_into(data, state, r, j, true, &mut resid);
            ss += resid.iter().map(|e| e * e).sum::<f64>();
        }
        total += -0.5 * (m * n) as f64 * (LN_2PI + s2.ln()) - 0.5 * ss / s2;
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Gaussian full conditionals
// ---------------------------------------------------------------------------

/// Full conditional of α_j: precision X1′X1·(m/σ_j²) + I/σ²_α, linear term
/// X1′·Σ_r(y_rj − X2β_rj − h_rj)/σ_j². Returns the factored precision and
/// the conditional mean.
fn alpha_conditional(
    data: &EnsembleDataset,
    state: &ModelState,
    prior: &PriorSpec,
    j: usize,
) -> Result<(DenseChol, Vec<f64>), ModelError> {
    let (m, n, q1) = (data.m(), data.n(), data.q1());
    let s2 = state.sigma2[j];
    let mut prec = data.x1tx1().to_vec();
    for v in prec.iter_mut() {
        *v *= m as f64 / s2;
    }
    for c in 0..q1 {
        prec[c * q1 + c] += 1.0 / prior.sigma2_alpha;
    }
    // Σ_r residuals with the α term left in place (with_h subtracts h only
    // after removing the current fitted surface), so rebuild explicitly:
    // s_i = Σ_r (y − X2β_rj − h_rj)_i.
    let p = data.p();
    let dim = data.lattice().dim();
    let mut s = vec![0.0; n];
    for r in 0..m {
        let y = data.y_rj(r, j);
        let beta = state.beta_rj(r, j, p, data.q2());
        let h = state.h_r_slice(r, dim);
        for i in 0..n {
            let mut x2b = 0.0;
            for (x, b) in data.x2_row(i).iter().zip(beta) {
                x2b += x * b;
            }
            s[i] += y[i] - x2b - h[i * p + j];
        }
    }
    let mut lin = vec![0.0; q1];
    design_t_vec(data.x1(), n, q1, &s, &mut lin);
    for v in lin.iter_mut() {
        *v /= s2;
    }
    let chol = DenseChol::new(&prec, q1)?;
    let mean = chol.solve(&lin)?;
    Ok((chol, mean))
}

/// Gibbs update of every α_j (exact conjugate draw).
pub fn update_alpha<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<(), ModelError> {
    let q1 = data.q1();
    for j in 0..data.p() {
        let (chol, mean) = alpha_conditional(data, state, prior, j)?;
        let draw = chol.sample_precision(&mean, rng);
        state.alpha[j * q1..(j + 1) * q1].copy_from_slice(&draw);
    }
    Ok(())
}

/// Full conditional of β_rj: precision X2′X2/σ_j² + I/σ_b², linear term
/// X2′(y_rj − X1α_j − h_rj)/σ_j² + β̄_j/σ_b².
fn beta_r_conditional(
    data: &EnsembleDataset,
    state: &ModelState,
    r: usize,
    j: usize,
) -> Result<(DenseChol, Vec<f64>), ModelError> {
    let (n, p, q1, q2) = (data.n(), data.p(), data.q1(), data.q2());
    let s2 = state.sigma2[j];
    let mut prec = data.x2tx2().to_vec();
    for v in prec.iter_mut() {
        *v /= s2;
    }
    for c in 0..q2 {
        prec[c * q2 + c] += 1.0 / state.sigma2_b;
    }
    let y = data.y_rj(r, j);
    let alpha = state.alpha_j(j, q1);
    let h = state.h_r_slice(r, data.lattice().dim());
    let mut resid = vec![0.0; n];
    for i in 0..n {
        let mut x1a = 0.0;
        for (x, a) in data.x1_row(i).iter().zip(alpha) {
            x1a += x * a;
        }
        resid[i] = y[i] - x1a - h[i * p + j];
    }
    let mut lin = vec![0.0; q2];
    design_t_vec(data.x2(), n, q2, &resid, &mut lin);
    let bbar = state.beta_bar_j(j, q2);
    for (c, v) in lin.iter_mut().enumerate() {
        *v = *v / s2 + bbar[c] / state.sigma2_b;
    }
    let chol = DenseChol::new(&prec, q2)?;
    let mean = chol.solve(&lin)?;
    Ok((chol, mean))
}

/// Gibbs update of every β_rj (exact conjugate draw).
pub fn update_beta_r<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    rng: &mut R,
) -> Result<(), ModelError> {
    let (p, q2) = (data.p(), data.q2());
    for r in 0..data.m() {
        for j in 0..p {
            let (chol, mean) = beta_r_conditional(data, state, r, j)?;
            let draw = chol.sample_precision(&mean, rng);
            let start = (r * p + j) * q2;
            state.beta_r[start..start + q2].copy_from_slice(&draw);
        }
    }
    Ok(())
}

/// Gibbs update of β̄: componentwise conjugate normal combining the m
/// member draws (variance σ_b²) with the N(0, σ²_β) prior.
pub fn update_beta_bar<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<(), ModelError> {
    let (m, p, q2) = (data.m(), data.p(), data.q2());
    for j in 0..p {
        for c in 0..q2 {
            let prec = m as f64 / state.sigma2_b + 1.0 / prior.sigma2_beta;
            let mut lin = 0.0;
            for r in 0..m {
                lin += state.beta_r[(r * p + j) * q2 + c];
            }
            lin /= state.sigma2_b;
            let mean = lin / prec;
            let z: f64 = rng.sample(StandardNormal);
            state.beta_bar[j * q2 + c] = mean + z / prec.sqrt();
        }
    }
    Ok(())
}

/// Factored conditional precision Q + D_σ (shared by all members) plus the
/// per-member conditional means (Q + D_σ)⁻¹(Q·h̄ + D_σ·resid_r).
fn h_r_conditional(
    data: &EnsembleDataset,
    state: &ModelState,
    q: &SparsePrecision,
    symbolic: &SymbolicFactor,
) -> Result<(CholFactor, Vec<Vec<f64>>), ModelError> {
    let (m, n, p) = (data.m(), data.n(), data.p());
    let dim = data.lattice().dim();
    let mut d = vec![0.0; dim];
    for i in 0..n {
        for j in 0..p {
            d[i * p + j] = 1.0 / state.sigma2[j];
        }
    }
    let cond = q.add_diagonal(&d)?;
    let factor = numeric_factorize(symbolic, &cond)?;
    let mut qh_bar = vec![0.0; dim];
    q.matvec(&state.h_bar, &mut qh_bar);
    let mut means = Vec::with_capacity(m);
    let mut resid = vec![0.0; n];
    let mut lin = vec![0.0; dim];
    for r in 0..m {
        lin.copy_from_slice(&qh_bar);
        for j in 0..p {
            residual_into(data, state, r, j, false, &mut resid);
            for i in 0..n {
                let a = i * p + j;
                lin[a] += d[a] * resid[i];
            }
        }
        means.push(factor.solve(&lin)?);
    }
    Ok((factor, means))
}

/// Gibbs update of every spatial effect h_r. One numeric factorization of
/// Q + D_σ serves all members; `q` must be assembled from `state.dep`.
pub fn update_h_r<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    q: &SparsePrecision,
    symbolic: &SymbolicFactor,
    rng: &mut R,
) -> Result<(), ModelError> {
    let dim = data.lattice().dim();
    let (factor, means) = h_r_conditional(data, state, q, symbolic)?;
    for (r, mean) in means.iter().enumerate() {
        let draw = factor.sample_gmrf(mean, rng);
        state.h_r[r * dim..(r + 1) * dim].copy_from_slice(&draw);
    }
    Ok(())
}

/// Factored conditional precision m·Q + I/σ²_h and conditional mean
/// (m·Q + I/σ²_h)⁻¹·Q·Σ_r h_r of the mean spatial effect.
fn h_bar_conditional(
    data: &EnsembleDataset,
    state: &ModelState,
    prior: &PriorSpec,
    q: &SparsePrecision,
    symbolic: &SymbolicFactor,
) -> Result<(CholFactor, Vec<f64>), ModelError> {
    let m = data.m();
    let dim = data.lattice().dim();
    let cond = q
        .scaled(m as f64)
        .add_diagonal(&vec![1.0 / prior.sigma2_h; dim])?;
    let factor = numeric_factorize(symbolic, &cond)?;
    let mut sum_h = vec![0.0; dim];
    for r in 0..m {
        for (s, v) in sum_h.iter_mut().zip(state.h_r_slice(r, dim)) {
            *s += v;
        }
    }
    let mut lin = vec![0.0; dim];
    q.matvec(&sum_h, &mut lin);
    let mean = factor.solve(&lin)?;
    Ok((factor, mean))
}

/// Gibbs update of the mean spatial effect h̄.
pub fn update_h_bar<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    prior: &PriorSpec,
    q: &SparsePrecision,
    symbolic: &SymbolicFactor,
    rng: &mut R,
) -> Result<(), ModelError> {
    let (factor, mean) = h_bar_conditional(data, state, prior, q, symbolic)?;
    state.h_bar = factor.sample_gmrf(&mean, rng);
    Ok(())
}

/// Gibbs update of the data variances σ_j² and the random-coefficient
/// variance σ_b², each inverse-gamma with shape `shape0 + count/2` and rate
/// `rate0 + ½·sum of squares`; `shape0 = rate0 = 0` is the scale-free prior.
pub fn update_sigma2<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    prior: &PriorSpec,
    rng: &mut R,
) -> Result<(), ModelError> {
    let (m, n, p, q2) = (data.m(), data.n(), data.p(), data.q2());
    let mut resid = vec![0.0; n];
    for j in 0..p {
        let mut ss = 0.0;
        for r in 0..m {
            residual_into(data, state, r, j, true, &mut resid);
            ss += resid.iter().map(|e| e * e).sum::<f64>();
        }
        state.sigma2[j] = draw_inverse_gamma(
            prior.sigma2_shape0 + 0.5 * (m * n) as f64,
            prior.sigma2_rate0 + 0.5 * ss,
            "sigma2",
            rng,
        )?;
    }
    let mut ss_b = 0.0;
    for r in 0..m {
        for j in 0..p {
            let b = state.beta_rj(r, j, p, q2);
            let bbar = state.beta_bar_j(j, q2);
            for (x, y) in b.iter().zip(bbar) {
                ss_b += (x - y) * (x - y);
            }
        }
    }
    state.sigma2_b = draw_inverse_gamma(
        prior.sigma2_shape0 + 0.5 * (m * p * q2) as f64,
        prior.sigma2_rate0 + 0.5 * ss_b,
        "sigma2_b",
        rng,
    )?;
    Ok(())
}

/// Inverse-gamma draw via the reciprocal of a Gamma(shape, rate) variate.
fn draw_inverse_gamma<R: Rng + ?Sized>(
    shape: f64,
    rate: f64,
    what: &'static str,
    rng: &mut R,
) -> Result<f64, ModelError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(ModelError::DegenerateResidual { what });
    }
    let gamma = Gamma::new(shape, 1.0 / rate)
        .map_err(|_| ModelError::DegenerateResidual { what })?;
    let g: f64 = rng.sample(gamma);
    if !(g > 0.0) {
        return Err(ModelError::DegenerateResidual { what });
    }
    Ok(1.0 / g)
}

// ---------------------------------------------------------------------------
// Dependence-parameter posterior
// ---------------------------------------------------------------------------

/// Result of evaluating the dependence-parameter posterior at a candidate:
/// the log-density (−∞ outside the support) and, when the candidate is
/// valid, the assembled precision with its numeric factor for reuse.
pub struct DepEvaluation {
    pub log_posterior: f64,
    pub factored: Option<(SparsePrecision, CholFactor)>,
}

/// Evaluates Σ_r [½·log det Q − ½·(h_r − h̄)′Q(h_r − h̄)] + log prior(dep)
/// at `dep`, with the spatial effects taken from `state`. The prior is
/// uniform on `dep_box` ∩ {positive definite} for (ρ, Φ) and uniform in
/// log τ_j² on the configured range, contributing −Σ_j log τ_j² with
/// respect to the τ² scale. Returns −∞ outside the support or when the
/// assembled precision is not positive definite.
pub fn evaluate_dep(
    dep: &DependenceParams,
    state: &ModelState,
    prior: &PriorSpec,
    pattern: &PrecisionPattern,
    symbolic: &SymbolicFactor,
) -> DepEvaluation {
    let reject = DepEvaluation {
        log_posterior: f64::NEG_INFINITY,
        factored: None,
    };
    if !dep_in_support(dep, prior) {
        return reject;
    }
    let q = match pattern.assemble(dep) {
        Ok(q) => q,
        Err(_) => return reject,
    };
    let factor = match numeric_factorize(symbolic, &q) {
        Ok(f) => f,
        Err(CholError::NotPositiveDefinite { .. }) => return reject,
        Err(_) => {
            debug_assert!(false, "dep evaluation with mismatched symbolic factor");
            return reject;
        }
    };
    let log_posterior = log_posterior_dep_prefactored(dep, state, prior, &q, &factor);
    DepEvaluation {
        log_posterior,
        factored: Some((q, factor)),
    }
}

/// True when `dep` lies inside the prior support: τ² positive with log τ²
/// in the configured range, and (ρ, Φ) inside the box. Positive
/// definiteness is checked separately by factorization.
fn dep_in_support(dep: &DependenceParams, prior: &PriorSpec) -> bool {
    for &t in dep.tau2_slice() {
        if !(t > 0.0 && t.is_finite()) {
            return false;
        }
        let lt = t.ln();
        if lt < prior.log_tau2_min || lt > prior.log_tau2_max {
            return false;
        }
    }
    prior.dep_box.contains(dep)
}

/// Same log-density as [`evaluate_dep`], reusing an already assembled and
/// factorized precision for `dep`. Used to refresh a cached Metropolis
/// target after the spatial effects change without refactorizing.
pub fn log_posterior_dep_prefactored(
    dep: &DependenceParams,
    state: &ModelState,
    prior: &PriorSpec,
    q: &SparsePrecision,
    factor: &CholFactor,
) -> f64 {
    if !dep_in_support(dep, prior) {
        return f64::NEG_INFINITY;
    }
    let log_prior: f64 = -dep.tau2_slice().iter().map(|t| t.ln()).sum::<f64>();
    let dim = q.dim();
    let m = state.h_r.len() / dim;
    let mut quad = 0.0;
    let mut diff = vec![0.0; dim];
    for r in 0..m {
        let h = &state.h_r[r * dim..(r + 1) * dim];
        for ((d, x), y) in diff.iter_mut().zip(h).zip(&state.h_bar) {
            *d = x - y;
        }
        quad += q.quad_form(&diff);
    }
    0.5 * m as f64 * factor.log_det() - 0.5 * quad + log_prior
}

/// Scalar wrapper around [`evaluate_dep`].
pub fn log_posterior_dep(
    dep: &DependenceParams,
    state: &ModelState,
    prior: &PriorSpec,
    pattern: &PrecisionPattern,
    symbolic: &SymbolicFactor,
) -> f64 {
    evaluate_dep(dep, state, prior, pattern, symbolic).log_posterior
}

// ---------------------------------------------------------------------------
// Generative draws (prior simulation and data simulation)
// ---------------------------------------------------------------------------

/// Draws a complete state from the prior. Requires proper inverse-gamma
/// hyperparameters; the dependence parameters are rejection-sampled
/// uniformly on the box ∩ PD region with τ² drawn log-uniformly.
pub fn draw_state_from_prior<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    prior: &PriorSpec,
    pattern: &PrecisionPattern,
    symbolic: &SymbolicFactor,
    rng: &mut R,
    max_tries: usize,
) -> Result<ModelState, ModelError> {
    if !(prior.sigma2_shape0 > 0.0 && prior.sigma2_rate0 > 0.0) {
        return Err(ModelError::ImproperPrior);
    }
    let (m, p) = (data.m(), data.p());
    let dim = data.lattice().dim();
    let tau2: Vec<f64> = (0..p)
        .map(|_| rng.random_range(prior.log_tau2_min..prior.log_tau2_max).exp())
        .collect();
    let dep = sample_valid_params_uniform(data.lattice(), rng, &prior.dep_box, &tau2, max_tries)?;

    let mut state = ModelState::init(data, dep);
    for s in state.sigma2.iter_mut() {
        *s = draw_inverse_gamma(prior.sigma2_shape0, prior.sigma2_rate0, "sigma2", rng)?;
    }
    state.sigma2_b = draw_inverse_gamma(prior.sigma2_shape0, prior.sigma2_rate0, "sigma2_b", rng)?;
    for a in state.alpha.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *a = prior.sigma2_alpha.sqrt() * z;
    }
    for b in state.beta_bar.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *b = prior.sigma2_beta.sqrt() * z;
    }
    let q2 = data.q2();
    for r in 0..m {
        for j in 0..p {
            for c in 0..q2 {
                let z: f64 = rng.sample(StandardNormal);
                state.beta_r[(r * p + j) * q2 + c] =
                    state.beta_bar[j * q2 + c] + state.sigma2_b.sqrt() * z;
            }
        }
    }
    for h in state.h_bar.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *h = prior.sigma2_h.sqrt() * z;
    }
    let q = pattern.assemble(&state.dep)?;
    let factor = numeric_factorize(symbolic, &q)?;
    for r in 0..m {
        let draw = factor.sample_gmrf(&state.h_bar, rng);
        state.h_r[r * dim..(r + 1) * dim].copy_from_slice(&draw);
    }
    Ok(state)
}

/// Draws a response vector from the data model given a state; layout matches
/// [`EnsembleDataset::y`]. σ_j² = 0 is allowed and gives the noiseless
/// regression-plus-spatial surface exactly.
pub fn draw_observations<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &ModelState,
    rng: &mut R,
) -> Vec<f64> {
    let (m, n, p) = (data.m(), data.n(), data.p());
    let dim = data.lattice().dim();
    let mut y = vec![0.0; m * p * n];
    let mut fitted = vec![0.0; n];
    for r in 0..m {
        let h = state.h_r_slice(r, dim);
        for j in 0..p {
            let sd = state.sigma2[j].sqrt();
            fitted_into(
                data,
                state.alpha_j(j, data.q1()),
                state.beta_rj(r, j, p, data.q2()),
                &mut fitted,
            );
            let base = (r * p + j) * n;
            for i in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                y[base + i] = fitted[i] + h[i * p + j] + sd * z;
            }
        }
    }
    y
}
