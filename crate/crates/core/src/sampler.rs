//! Three-regime adaptive Metropolis-within-Gibbs sampler.
//!
//! Every Gaussian and inverse-gamma level of the hierarchy is updated by
//! its exact conjugate full conditional ([`crate::model`]); the dependence
//! parameters (ρ, Φ, τ²) have no conjugate form and are updated by
//! random-walk Metropolis in the working coordinates (ρ, Φ, log τ²).
//! Working in log τ² makes the positivity constraint implicit; the log
//! target carries the +Σ log τ² change-of-variables term so the chain
//! still samples the τ²-scale posterior.
//!
//! A chain moves through three regimes:
//!
//! 1. **Scalar adaptation** — every dependence coordinate is proposed
//!    one at a time; each proposal scale is tuned toward the target
//!    acceptance rate at fixed intervals.
//! 2. **Joint adaptation** — the strongly coupled coordinates (all ρ plus,
//!    by default, the cross-variable φ) move as one block with a
//!    multivariate normal proposal whose covariance is re-estimated from
//!    the chain's own recent history; the remaining coordinates keep their
//!    scalar updates, and all scales continue to adapt.
//! 3. **Frozen collection** — adaptation stops entirely (restoring exact
//!    detailed balance) and every `thin`-th state is retained.
//!
//! Chains are embarrassingly parallel: `run_ensemble_analysis` runs
//! `n_chains` seeded chains across worker threads (`MVMRF_THREADS`
//! overrides the thread count) and pools them into a
//! [`PosteriorArchive`] with split-chain convergence diagnostics.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::thread;

use log::{info, warn};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::archive::{
    AcceptanceRecord, ArchiveDims, ArchiveHeader, BlockId, ChainOutput, ConvergenceReport,
    MonitoredScalar, PosteriorArchive, ProposalSnapshot, SampleBlocks,
};
use crate::chol::{compute_ordering, numeric_factorize, symbolic_factorize, CholError, CholFactor, SymbolicFactor};
use crate::dense::DenseChol;
use crate::lattice::StackedLattice;
use crate::model::{self, EnsembleDataset, ModelError, ModelState, PriorSpec};
use crate::precision::{
    sample_valid_params_uniform, DependenceParams, PrecisionError, PrecisionPattern,
};
use crate::sparse::SparsePrecision;

/// Convergence threshold on the potential scale reduction factor.
pub const PSRF_THRESHOLD: f64 = 1.1;

/// Number of randomly monitored mean-surface components.
const MONITOR_HBAR: usize = 5;
/// Salt mixed into the seed for monitor-component selection so the picks
/// are independent of the chain streams.
const MONITOR_SALT: u64 = 0x6d6f_6e69_746f_72;

/// Proposal scales are clamped to `initial × [SCALE_FLOOR_FACTOR, SCALE_CEIL_FACTOR]`.
const SCALE_FLOOR_FACTOR: f64 = 1e-6;
const SCALE_CEIL_FACTOR: f64 = 1e2;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("no valid starting point found: {0}")]
    Startup(#[from] PrecisionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("factorization failed at the current state: {0}")]
    Factorization(#[from] CholError),
    #[error("convergence diagnostics need at least two chains (got {0})")]
    TooFewChains(usize),
    #[error("chain trajectories are mismatched or shorter than two draws")]
    ChainLength,
    #[error("zero variance both within and between chains")]
    DegenerateVariance,
    #[error("sampler worker thread panicked")]
    WorkerPanic,
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which dependence coordinates form the joint Metropolis block in
/// regimes 2–3. τ² coordinates always stay scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JointBlock {
    /// All ρ plus the off-diagonal (cross-variable) φ.
    CrossDependence,
    /// All ρ and all φ, including the within-variable diagonals.
    AllDependence,
}

/// Run-length, adaptation, and seeding knobs for one sampler run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    pub regime1_iters: usize,
    pub regime2_iters: usize,
    pub regime3_iters: usize,
    /// Keep every `thin`-th regime-3 state.
    pub thin: usize,
    pub target_acceptance: f64,
    /// Iterations between adaptation events in regimes 1–2.
    pub adapt_interval: usize,
    /// Gain κ in the update `scale ← scale · exp(κ·(observed − target))`.
    pub adapt_gain: f64,
    /// Starting random-walk standard deviation for every scalar coordinate.
    pub initial_scale: f64,
    pub joint_block: JointBlock,
    /// Chain c is seeded with `seed + c`.
    pub seed: u64,
    /// Attempts allowed when rejection-sampling the starting dependence
    /// parameters from the prior.
    pub max_start_tries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_chains: 10,
            regime1_iters: 2500,
            regime2_iters: 10_000,
            regime3_iters: 10_000,
            thin: 10,
            target_acceptance: 0.20,
            adapt_interval: 100,
            adapt_gain: 1.0,
            initial_scale: 0.1,
            joint_block: JointBlock::CrossDependence,
            seed: 0,
            max_start_tries: 10_000,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.n_chains == 0 {
            return Err(SamplerError::Config("n_chains must be at least 1".into()));
        }
        if self.thin == 0 {
            return Err(SamplerError::Config("thin must be at least 1".into()));
        }
        if self.adapt_interval == 0 {
            return Err(SamplerError::Config("adapt_interval must be at least 1".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(SamplerError::Config(format!(
                "target_acceptance must be in (0, 1), got {}",
                self.target_acceptance
            )));
        }
        if !(self.adapt_gain > 0.0 && self.adapt_gain.is_finite()) {
            return Err(SamplerError::Config("adapt_gain must be positive".into()));
        }
        if !(self.initial_scale > 0.0 && self.initial_scale.is_finite()) {
            return Err(SamplerError::Config("initial_scale must be positive".into()));
        }
        if self.max_start_tries == 0 {
            return Err(SamplerError::Config("max_start_tries must be at least 1".into()));
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn samples_per_chain(&self) -> usize {
        self.regime3_iters / self.thin
    }
}

// ---------------------------------------------------------------------------
// Working coordinates
// ---------------------------------------------------------------------------

/// Layout of the Metropolis working vector: `[ρ…, φ…, log τ²…]` with ρ in
/// condensed upper-triangle order and φ row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DepCoords {
    p: usize,
}

impl DepCoords {
    pub fn new(p: usize) -> Self {
        DepCoords { p }
    }

    pub fn n_rho(&self) -> usize {
        self.p * (self.p - 1) / 2
    }

    pub fn n_phi(&self) -> usize {
        self.p * self.p
    }

    pub fn len(&self) -> usize {
        self.n_rho() + self.n_phi() + self.p
    }

    pub fn is_empty(&self) -> bool {
        false // p ≥ 1 always yields at least φ and log τ² coordinates
    }

    fn tau_start(&self) -> usize {
        self.n_rho() + self.n_phi()
    }

    pub fn is_log_tau2(&self, k: usize) -> bool {
        k >= self.tau_start()
    }

    pub fn pack(&self, dep: &DependenceParams) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.len());
        x.extend_from_slice(dep.rho_slice());
        x.extend_from_slice(dep.phi_slice());
        x.extend(dep.tau2_slice().iter().map(|t| t.ln()));
        x
    }

    /// Inverse of [`DepCoords::pack`]. Fails only when a log τ² coordinate
    /// is so extreme that exp overflows the positive finite range.
    pub fn unpack(&self, x: &[f64]) -> Result<DependenceParams, PrecisionError> {
        assert_eq!(x.len(), self.len());
        let nr = self.n_rho();
        let np = self.n_phi();
        DependenceParams::new(
            self.p,
            x[..nr].to_vec(),
            x[nr..nr + np].to_vec(),
            x[nr + np..].iter().map(|v| v.exp()).collect(),
        )
    }

    /// Human-readable coordinate name, also used as the Metropolis block
    /// label in acceptance logs.
    pub fn name(&self, k: usize) -> String {
        let nr = self.n_rho();
        if k < nr {
            let mut idx = k;
            for a in 0..self.p {
                let row = self.p - a - 1;
                if idx < row {
                    return format!("rho[{},{}]", a, a + 1 + idx);
                }
                idx -= row;
            }
            unreachable!("condensed index within bounds");
        } else if k < nr + self.n_phi() {
            let t = k - nr;
            format!("phi[{},{}]", t / self.p, t % self.p)
        } else {
            format!("log_tau2[{}]", k - nr - self.n_phi())
        }
    }

    /// Log-Jacobian of the τ² → log τ² reparameterization at `x`, added to
    /// the τ²-scale log posterior to form the working-coordinate target.
    pub fn jacobian(&self, x: &[f64]) -> f64 {
        x[self.tau_start()..].iter().sum()
    }

    /// Coordinate indices forming the joint block (ascending).
    pub fn joint_members(&self, block: JointBlock) -> Vec<usize> {
        let mut members: Vec<usize> = (0..self.n_rho()).collect();
        for j in 0..self.p {
            for l in 0..self.p {
                if block == JointBlock::AllDependence || j != l {
                    members.push(self.n_rho() + j * self.p + l);
                }
            }
        }
        members
    }
}

// ---------------------------------------------------------------------------
// Adaptation primitives
// ---------------------------------------------------------------------------

/// One multiplicative Robbins–Monro style scale update:
/// `scale · exp(gain · (observed − target))`, clamped to `[floor, ceiling]`.
/// At `observed == target` the scale is returned bitwise unchanged.
pub fn adapt_scale(
    scale: f64,
    observed: f64,
    target: f64,
    gain: f64,
    floor: f64,
    ceiling: f64,
) -> f64 {
    (scale * (gain * (observed - target)).exp()).clamp(floor, ceiling)
}

/// Welford-style running mean and covariance of the visited block states.
#[derive(Debug, Clone)]
struct RunningMoments {
    n: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl RunningMoments {
    fn new(d: usize) -> Self {
        RunningMoments {
            n: 0,
            mean: vec![0.0; d],
            m2: vec![0.0; d * d],
        }
    }

    fn push(&mut self, x: &[f64]) {
        let d = self.mean.len();
        assert_eq!(x.len(), d);
        self.n += 1;
        let inv = 1.0 / self.n as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, b)| a - b).collect();
        for (m, dl) in self.mean.iter_mut().zip(&delta) {
            *m += dl * inv;
        }
        for i in 0..d {
            for j in 0..d {
                self.m2[i * d + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    fn count(&self) -> u64 {
        self.n
    }

    fn covariance(&self) -> Option<Vec<f64>> {
        if self.n < 2 {
            return None;
        }
        let s = 1.0 / (self.n - 1) as f64;
        Some(self.m2.iter().map(|v| v * s).collect())
    }
}

// ---------------------------------------------------------------------------
// Convergence diagnostic
// ---------------------------------------------------------------------------

/// Potential scale reduction factor over parallel chains:
/// `sqrt(((n−1)/n · W + B/n) / W)` with `W` the mean within-chain variance
/// and `B` the between-chain variance estimate. `W = 0` with `B > 0` yields
/// `+∞` (chains stuck at different points); `W = B = 0` is an error because
/// the scalar carries no information either way.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64, SamplerError> {
    let c = chains.len();
    if c < 2 {
        return Err(SamplerError::TooFewChains(c));
    }
    let n = chains[0].len();
    if n < 2 || chains.iter().any(|t| t.len() != n) {
        return Err(SamplerError::ChainLength);
    }
    let nf = n as f64;
    let cf = c as f64;
    let means: Vec<f64> = chains.iter().map(|t| t.iter().sum::<f64>() / nf).collect();
    let grand = means.iter().sum::<f64>() / cf;
    let b = nf / (cf - 1.0) * means.iter().map(|m| (m - grand) * (m - grand)).sum::<f64>();
    let w = chains
        .iter()
        .zip(&means)
        .map(|(t, m)| t.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (nf - 1.0))
        .sum::<f64>()
        / cf;
    if w == 0.0 {
        return if b == 0.0 {
            Err(SamplerError::DegenerateVariance)
        } else {
            Ok(f64::INFINITY)
        };
    }
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    Ok((var_plus / w).sqrt())
}

// ---------------------------------------------------------------------------
// Shared per-lattice context
// ---------------------------------------------------------------------------

/// Precision pattern and symbolic factor for one lattice, computed once and
/// shared by every chain (the sparsity never changes during a run).
pub struct SamplerContext {
    pattern: PrecisionPattern,
    symbolic: SymbolicFactor,
}

impl SamplerContext {
    pub fn new(lattice: &StackedLattice) -> Self {
        let pattern = PrecisionPattern::new(lattice);
        let perm = compute_ordering(pattern.pattern());
        let symbolic = symbolic_factorize(pattern.pattern(), perm);
        SamplerContext { pattern, symbolic }
    }

    pub fn pattern(&self) -> &PrecisionPattern {
        &self.pattern
    }

    pub fn symbolic(&self) -> &SymbolicFactor {
        &self.symbolic
    }

    /// Assembles and numerically factorizes the precision at `dep`.
    pub fn factorize(
        &self,
        dep: &DependenceParams,
    ) -> Result<(SparsePrecision, CholFactor), SamplerError> {
        let q = self.pattern.assemble(dep)?;
        let factor = numeric_factorize(&self.symbolic, &q)?;
        Ok((q, factor))
    }
}

// ---------------------------------------------------------------------------
// Metropolis machinery
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
struct Counter {
    proposed: u64,
    accepted: u64,
}

impl Counter {
    fn rate(self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

struct JointProposal {
    members: Vec<usize>,
    scale: f64,
    chol: DenseChol,
    window: Counter,
    moments: RunningMoments,
}

/// Current dependence state of one chain: working coordinates, cached
/// factorization, per-coordinate proposal scales, and bookkeeping.
struct DepMh {
    coords: DepCoords,
    x: Vec<f64>,
    dep: DependenceParams,
    log_target: f64,
    q: SparsePrecision,
    factor: CholFactor,
    scales: Vec<f64>,
    windows: Vec<Counter>,
    joint: Option<JointProposal>,
    scale_floor: f64,
    scale_ceil: f64,
    counters: BTreeMap<(u8, String), Counter>,
}

impl DepMh {
    fn new(
        coords: DepCoords,
        dep: DependenceParams,
        state: &ModelState,
        prior: &PriorSpec,
        ctx: &SamplerContext,
        scales: Vec<f64>,
        scale_floor: f64,
        scale_ceil: f64,
    ) -> Result<Self, SamplerError> {
        assert_eq!(scales.len(), coords.len());
        let (q, factor) = ctx.factorize(&dep)?;
        let x = coords.pack(&dep);
        let log_target =
            model::log_posterior_dep_prefactored(&dep, state, prior, &q, &factor) + coords.jacobian(&x);
        if !log_target.is_finite() {
            return Err(SamplerError::Config(
                "starting dependence parameters lie outside the posterior support".into(),
            ));
        }
        let n = coords.len();
        Ok(DepMh {
            coords,
            x,
            dep,
            log_target,
            q,
            factor,
            scales,
            windows: vec![Counter::default(); n],
            joint: None,
            scale_floor,
            scale_ceil,
            counters: BTreeMap::new(),
        })
    }

    fn q(&self) -> &SparsePrecision {
        &self.q
    }

    fn dep(&self) -> &DependenceParams {
        &self.dep
    }

    /// Re-evaluates the cached log target after the Gibbs blocks move the
    /// spatial effects; the factorization itself is still valid because the
    /// dependence parameters did not change.
    fn refresh(&mut self, state: &ModelState, prior: &PriorSpec) {
        self.log_target =
            model::log_posterior_dep_prefactored(&self.dep, state, prior, &self.q, &self.factor)
                + self.coords.jacobian(&self.x);
    }

    /// One Metropolis accept/reject at `x_new`. Consumes exactly one
    /// uniform variate regardless of the outcome.
    fn try_move<R: Rng + ?Sized>(
        &mut self,
        x_new: Vec<f64>,
        state: &ModelState,
        prior: &PriorSpec,
        ctx: &SamplerContext,
        rng: &mut R,
    ) -> bool {
        let ts = self.coords.tau_start();
        let tau_ok = x_new[ts..]
            .iter()
            .all(|&v| v.is_finite() && v >= prior.log_tau2_min && v <= prior.log_tau2_max);
        let mut candidate = None;
        let log_target_new = if !tau_ok {
            f64::NEG_INFINITY
        } else {
            match self.coords.unpack(&x_new) {
                Err(_) => f64::NEG_INFINITY,
                Ok(dep_new) => {
                    let eval =
                        model::evaluate_dep(&dep_new, state, prior, ctx.pattern(), ctx.symbolic());
                    let lt = eval.log_posterior + self.coords.jacobian(&x_new);
                    if let Some(factored) = eval.factored {
                        candidate = Some((dep_new, factored));
                    }
                    lt
                }
            }
        };
        let u: f64 = rng.random();
        if u.ln() < log_target_new - self.log_target {
            match candidate {
                Some((dep_new, (q, factor))) => {
                    self.dep = dep_new;
                    self.q = q;
                    self.factor = factor;
                    self.x = x_new;
                    self.log_target = log_target_new;
                    true
                }
                None => {
                    debug_assert!(false, "accepted a move with no factorization");
                    false
                }
            }
        } else {
            false
        }
    }

    fn record(&mut self, regime: u8, block: String, accepted: bool) {
        let c = self.counters.entry((regime, block)).or_default();
        c.proposed += 1;
        if accepted {
            c.accepted += 1;
        }
    }

    /// Scalar random-walk pass over every coordinate not in `skip`.
    fn scalar_pass<R: Rng + ?Sized>(
        &mut self,
        regime: u8,
        skip: &[usize],
        state: &ModelState,
        prior: &PriorSpec,
        ctx: &SamplerContext,
        rng: &mut R,
    ) {
        for k in 0..self.coords.len() {
            if skip.binary_search(&k).is_ok() {
                continue;
            }
            let z: f64 = rng.sample(StandardNormal);
            let mut x_new = self.x.clone();
            x_new[k] += self.scales[k] * z;
            let accepted = self.try_move(x_new, state, prior, ctx, rng);
            self.windows[k].proposed += 1;
            if accepted {
                self.windows[k].accepted += 1;
            }
            self.record(regime, self.coords.name(k), accepted);
        }
    }

    /// One joint-block proposal (no-op when the block is empty).
    fn joint_pass<R: Rng + ?Sized>(
        &mut self,
        regime: u8,
        state: &ModelState,
        prior: &PriorSpec,
        ctx: &SamplerContext,
        rng: &mut R,
    ) {
        let x_new = {
            let Some(joint) = &self.joint else { return };
            if joint.members.is_empty() {
                return;
            }
            let step = joint.chol.sample_covariance(&vec![0.0; joint.members.len()], rng);
            let mut x_new = self.x.clone();
            for (i, &k) in joint.members.iter().enumerate() {
                x_new[k] += joint.scale * step[i];
            }
            x_new
        };
        let accepted = self.try_move(x_new, state, prior, ctx, rng);
        let joint = self.joint.as_mut().expect("joint block present");
        joint.window.proposed += 1;
        if accepted {
            joint.window.accepted += 1;
        }
        self.record(regime, "joint".into(), accepted);
    }

    /// Installs the joint block at the regime-2 boundary: the proposal
    /// starts from the regime-1 scalar scales (diagonal covariance) and is
    /// re-estimated from chain history as regime 2 progresses.
    fn enter_joint(&mut self, block: JointBlock) {
        let members = self.coords.joint_members(block);
        if members.is_empty() {
            self.joint = None;
            return;
        }
        let d = members.len();
        let mut cov = vec![0.0; d * d];
        for (i, &k) in members.iter().enumerate() {
            cov[i * d + i] = self.scales[k] * self.scales[k];
        }
        let chol = DenseChol::new(&cov, d).expect("diagonal covariance with positive entries");
        self.joint = Some(JointProposal {
            members,
            scale: 1.0,
            chol,
            window: Counter::default(),
            moments: RunningMoments::new(d),
        });
    }

    fn joint_members_snapshot(&self) -> Vec<usize> {
        self.joint.as_ref().map(|j| j.members.clone()).unwrap_or_default()
    }

    /// Records the current working coordinates of the joint block into the
    /// covariance estimator.
    fn push_moments(&mut self) {
        let x = &self.x;
        if let Some(joint) = &mut self.joint {
            let vals: Vec<f64> = joint.members.iter().map(|&k| x[k]).collect();
            joint.moments.push(&vals);
        }
    }

    /// Adaptation event: retune every proposed scalar scale, refresh the
    /// joint covariance from the running moments, retune the joint scale,
    /// and append snapshots of the resulting proposals.
    fn adapt(
        &mut self,
        regime: u8,
        iteration: u64,
        target: f64,
        gain: f64,
        history: &mut Vec<ProposalSnapshot>,
    ) {
        for k in 0..self.coords.len() {
            if self.windows[k].proposed == 0 {
                continue;
            }
            let rate = self.windows[k].rate();
            self.scales[k] = adapt_scale(
                self.scales[k],
                rate,
                target,
                gain,
                self.scale_floor,
                self.scale_ceil,
            );
            self.windows[k] = Counter::default();
            history.push(ProposalSnapshot {
                iteration,
                regime,
                block: self.coords.name(k),
                scale: self.scales[k],
                cov: None,
            });
        }
        if let Some(joint) = &mut self.joint {
            if joint.window.proposed > 0 {
                let rate = joint.window.rate();
                joint.scale = adapt_scale(
                    joint.scale,
                    rate,
                    target,
                    gain,
                    SCALE_FLOOR_FACTOR,
                    SCALE_CEIL_FACTOR,
                );
                joint.window = Counter::default();
            }
            let d = joint.members.len();
            if joint.moments.count() >= (d + 2) as u64 {
                if let Some(mut cov) = joint.moments.covariance() {
                    let mean_diag =
                        (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
                    let jitter = (1e-8 * mean_diag).max(1e-12);
                    for i in 0..d {
                        cov[i * d + i] += jitter;
                    }
                    if let Ok(chol) = DenseChol::new(&cov, d) {
                        joint.chol = chol;
                    }
                }
            }
            history.push(ProposalSnapshot {
                iteration,
                regime,
                block: "joint".into(),
                scale: joint.scale,
                cov: Some(proposal_covariance(&joint.chol)),
            });
        }
    }

    /// Appends a snapshot of every proposal without changing anything;
    /// emitted at the regime-3 entry and exit so the freeze is auditable.
    fn snapshot_all(&self, iteration: u64, regime: u8, history: &mut Vec<ProposalSnapshot>) {
        for k in 0..self.coords.len() {
            history.push(ProposalSnapshot {
                iteration,
                regime,
                block: self.coords.name(k),
                scale: self.scales[k],
                cov: None,
            });
        }
        if let Some(joint) = &self.joint {
            history.push(ProposalSnapshot {
                iteration,
                regime,
                block: "joint".into(),
                scale: joint.scale,
                cov: Some(proposal_covariance(&joint.chol)),
            });
        }
    }

    fn acceptance_log(&self) -> Vec<AcceptanceRecord> {
        self.counters
            .iter()
            .map(|(&(regime, ref block), c)| AcceptanceRecord {
                regime,
                block: block.clone(),
                proposed: c.proposed,
                accepted: c.accepted,
            })
            .collect()
    }

    /// Mean acceptance rate over the blocks proposed in `regime` so far.
    fn regime_rate(&self, regime: u8) -> f64 {
        let mut proposed = 0u64;
        let mut accepted = 0u64;
        for (&(r, _), c) in &self.counters {
            if r == regime {
                proposed += c.proposed;
                accepted += c.accepted;
            }
        }
        Counter { proposed, accepted }.rate()
    }
}

/// Reconstructs L·Lᵀ (row-major) from a dense Cholesky factor.
fn proposal_covariance(chol: &DenseChol) -> Vec<f64> {
    let d = chol.dim();
    let l = chol.l();
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for k in 0..=i.min(j) {
                s += l[i * d + k] * l[j * d + k];
            }
            cov[i * d + j] = s;
        }
    }
    cov
}

// ---------------------------------------------------------------------------
// Chain driver
// ---------------------------------------------------------------------------

fn dims_of(data: &EnsembleDataset) -> ArchiveDims {
    let grid = data.lattice().grid();
    ArchiveDims {
        nx: grid.nx(),
        ny: grid.ny(),
        p: data.p(),
        m: data.m(),
        q1: data.q1(),
        q2: data.q2(),
    }
}

/// The six conjugate Gibbs blocks, in sweep order. `q` must be assembled
/// from the current dependence parameters.
fn gibbs_pass<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    prior: &PriorSpec,
    q: &SparsePrecision,
    symbolic: &SymbolicFactor,
    rng: &mut R,
) -> Result<(), ModelError> {
    model::update_alpha(data, state, prior, rng)?;
    model::update_beta_r(data, state, rng)?;
    model::update_beta_bar(data, state, prior, rng)?;
    model::update_h_r(data, state, q, symbolic, rng)?;
    model::update_h_bar(data, state, prior, q, symbolic, rng)?;
    model::update_sigma2(data, state, prior, rng)?;
    Ok(())
}

fn record_row(blocks: &mut SampleBlocks, state: &ModelState, dep: &DependenceParams) {
    blocks.alpha.push_row(&state.alpha);
    blocks.beta_r.push_row(&state.beta_r);
    blocks.beta_bar.push_row(&state.beta_bar);
    blocks.sigma2.push_row(&state.sigma2);
    blocks.sigma2_b.push_row(&[state.sigma2_b]);
    blocks.rho.push_row(dep.rho_slice());
    blocks.phi.push_row(dep.phi_slice());
    blocks.tau2.push_row(dep.tau2_slice());
    blocks.h_bar.push_row(&state.h_bar);
    blocks.h_r.push_row(&state.h_r);
}

/// Runs one chain against a freshly built context. Prefer
/// [`run_chain_in`] when running several chains on the same lattice.
pub fn run_chain(
    cfg: &SamplerConfig,
    data: &EnsembleDataset,
    prior: &PriorSpec,
    chain_id: usize,
) -> Result<ChainOutput, SamplerError> {
    let ctx = SamplerContext::new(data.lattice());
    run_chain_in(cfg, data, prior, &ctx, chain_id)
}

/// Runs one chain: prior-drawn start, the three regimes, thinned
/// collection. Deterministic given `(cfg.seed, chain_id)`.
pub fn run_chain_in(
    cfg: &SamplerConfig,
    data: &EnsembleDataset,
    prior: &PriorSpec,
    ctx: &SamplerContext,
    chain_id: usize,
) -> Result<ChainOutput, SamplerError> {
    cfg.validate()?;
    prior.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(chain_id as u64));
    let lattice = data.lattice();
    let p = lattice.p();
    let dep0 = sample_valid_params_uniform(
        lattice,
        &mut rng,
        &prior.dep_box,
        &vec![1.0; p],
        cfg.max_start_tries,
    )?;
    let mut state = ModelState::init(data, dep0.clone());
    let coords = DepCoords::new(p);
    let mut mh = DepMh::new(
        coords,
        dep0,
        &state,
        prior,
        ctx,
        vec![cfg.initial_scale; coords.len()],
        cfg.initial_scale * SCALE_FLOOR_FACTOR,
        cfg.initial_scale * SCALE_CEIL_FACTOR,
    )?;
    let mut blocks = SampleBlocks::empty(&dims_of(data));
    let mut history: Vec<ProposalSnapshot> = Vec::new();
    let total = cfg.regime1_iters + cfg.regime2_iters + cfg.regime3_iters;
    let mut iteration: u64 = 0;
    for regime in 1u8..=3 {
        let iters = match regime {
            1 => cfg.regime1_iters,
            2 => cfg.regime2_iters,
            _ => cfg.regime3_iters,
        };
        if regime == 2 {
            mh.enter_joint(cfg.joint_block);
        }
        if regime == 3 {
            mh.snapshot_all(iteration, regime, &mut history);
        }
        let skip: Vec<usize> = if regime >= 2 {
            mh.joint_members_snapshot()
        } else {
            Vec::new()
        };
        for t in 0..iters {
            gibbs_pass(data, &mut state, prior, mh.q(), ctx.symbolic(), &mut rng)?;
            mh.refresh(&state, prior);
            if regime >= 2 {
                mh.joint_pass(regime, &state, prior, ctx, &mut rng);
            }
            mh.scalar_pass(regime, &skip, &state, prior, ctx, &mut rng);
            if regime == 2 {
                mh.push_moments();
            }
            if regime <= 2 && (t + 1) % cfg.adapt_interval == 0 {
                mh.adapt(
                    regime,
                    iteration + 1,
                    cfg.target_acceptance,
                    cfg.adapt_gain,
                    &mut history,
                );
                info!(
                    "chain {chain_id}: iteration {}/{} regime {} acceptance {:.3} log target {:.3}",
                    iteration + 1,
                    total,
                    regime,
                    mh.regime_rate(regime),
                    mh.log_target,
                );
            }
            if regime == 3 && (t + 1) % cfg.thin == 0 {
                record_row(&mut blocks, &state, mh.dep());
            }
            iteration += 1;
        }
    }
    mh.snapshot_all(iteration, 3, &mut history);
    Ok(ChainOutput {
        chain_id,
        acceptance_log: mh.acceptance_log(),
        proposal_history: history,
        samples: blocks,
    })
}

/// One full transition of the posterior kernel with fixed scalar proposal
/// scales on every dependence coordinate: the six Gibbs blocks followed by
/// a scalar Metropolis pass. The kernel holds the posterior invariant,
/// which makes it the natural transition for coupled simulator-consistency
/// checks. `state.dep` must lie inside the support.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    data: &EnsembleDataset,
    state: &mut ModelState,
    prior: &PriorSpec,
    ctx: &SamplerContext,
    scales: &[f64],
    rng: &mut R,
) -> Result<(), SamplerError> {
    let coords = DepCoords::new(data.p());
    if scales.len() != coords.len() {
        return Err(SamplerError::Config(format!(
            "expected {} proposal scales, got {}",
            coords.len(),
            scales.len()
        )));
    }
    let floor = scales.iter().cloned().fold(f64::INFINITY, f64::min);
    let ceil = scales.iter().cloned().fold(0.0f64, f64::max);
    let mut mh = DepMh::new(
        coords,
        state.dep.clone(),
        state,
        prior,
        ctx,
        scales.to_vec(),
        floor,
        ceil,
    )?;
    gibbs_pass(data, state, prior, mh.q(), ctx.symbolic(), rng)?;
    mh.refresh(state, prior);
    mh.scalar_pass(1, &[], state, prior, ctx, rng);
    state.dep = mh.dep().clone();
    Ok(())
}

// ---------------------------------------------------------------------------
// Multi-chain driver
// ---------------------------------------------------------------------------

fn worker_count(n_chains: usize) -> usize {
    let requested = std::env::var("MVMRF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v >= 1);
    let count = requested
        .unwrap_or_else(|| thread::available_parallelism().map(|v| v.get()).unwrap_or(1));
    count.clamp(1, n_chains.max(1))
}

/// The scalars tracked by the convergence diagnostic: every dependence
/// coordinate on its natural scale, the variances, and a seeded handful of
/// mean-surface components. Returns `(name, block, column)` triples.
pub fn monitored_scalars(seed: u64, dims: &ArchiveDims) -> Vec<(String, BlockId, usize)> {
    let coords = DepCoords::new(dims.p);
    let mut list = Vec::new();
    for k in 0..coords.n_rho() {
        list.push((coords.name(k), BlockId::Rho, k));
    }
    for t in 0..coords.n_phi() {
        list.push((coords.name(coords.n_rho() + t), BlockId::Phi, t));
    }
    for j in 0..dims.p {
        list.push((format!("sigma2[{j}]"), BlockId::Sigma2, j));
    }
    list.push(("sigma2_b".into(), BlockId::Sigma2B, 0));
    let dim = dims.spatial_dim();
    let take = MONITOR_HBAR.min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ MONITOR_SALT);
    let mut picked = BTreeSet::new();
    while picked.len() < take {
        picked.insert(rng.random_range(0..dim));
    }
    for i in picked {
        list.push((format!("h_bar[{i}]"), BlockId::HBar, i));
    }
    list
}

fn convergence_report(seed: u64, dims: &ArchiveDims, chains: &[ChainOutput]) -> ConvergenceReport {
    let rows = chains.first().map(|c| c.samples.alpha.rows()).unwrap_or(0);
    if chains.len() < 2 || rows < 2 {
        return ConvergenceReport::not_evaluated();
    }
    let mut monitored = Vec::new();
    let mut converged = true;
    for (name, block, col) in monitored_scalars(seed, dims) {
        let series: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.samples.get(block).column(col))
            .collect();
        let psrf = match gelman_rubin(&series) {
            Ok(v) => {
                if !(v < PSRF_THRESHOLD) {
                    converged = false;
                }
                if v.is_finite() {
                    Some(v)
                } else {
                    None
                }
            }
            // Zero variance within and between chains: a constant scalar
            // carries no convergence information either way.
            Err(SamplerError::DegenerateVariance) => None,
            Err(_) => {
                converged = false;
                None
            }
        };
        monitored.push(MonitoredScalar { name, psrf });
    }
    ConvergenceReport {
        threshold: PSRF_THRESHOLD,
        evaluated: true,
        converged,
        monitored,
    }
}

/// SHA-256 over the canonical JSON serialization of the effective sampler
/// configuration and priors. Callers embedding the run in a larger
/// configuration may overwrite the header hash with their own.
pub fn sampler_config_hash(cfg: &SamplerConfig, prior: &PriorSpec) -> String {
    #[derive(Serialize)]
    struct Effective<'a> {
        sampler: &'a SamplerConfig,
        priors: &'a PriorSpec,
    }
    let json = serde_json::to_vec(&Effective {
        sampler: cfg,
        priors: prior,
    })
    .expect("config serialization");
    let digest = Sha256::digest(&json);
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

/// Runs `cfg.n_chains` independent chains in parallel (worker count from
/// `MVMRF_THREADS`, defaulting to the available parallelism), evaluates
/// split-chain convergence, and pools everything into an archive. A
/// convergence failure is recorded in the header and logged as a warning,
/// not treated as fatal.
pub fn run_ensemble_analysis(
    cfg: &SamplerConfig,
    data: &EnsembleDataset,
    prior: &PriorSpec,
) -> Result<PosteriorArchive, SamplerError> {
    cfg.validate()?;
    prior.validate()?;
    let ctx = SamplerContext::new(data.lattice());
    let workers = worker_count(cfg.n_chains);
    let mut slots: Vec<Option<Result<ChainOutput, SamplerError>>> =
        (0..cfg.n_chains).map(|_| None).collect();
    thread::scope(|s| {
        let (tx, rx) = mpsc::channel();
        for w in 0..workers {
            let tx = tx.clone();
            let ctx = &ctx;
            s.spawn(move || {
                let mut id = w;
                while id < cfg.n_chains {
                    let result = run_chain_in(cfg, data, prior, ctx, id);
                    if tx.send((id, result)).is_err() {
                        return;
                    }
                    id += workers;
                }
            });
        }
        drop(tx);
        for (id, result) in rx {
            slots[id] = Some(result);
        }
    });
    let mut chains = Vec::with_capacity(cfg.n_chains);
    for slot in slots {
        chains.push(slot.ok_or(SamplerError::WorkerPanic)??);
    }
    let dims = dims_of(data);
    let convergence = convergence_report(cfg.seed, &dims, &chains);
    if convergence.evaluated && !convergence.converged {
        let offenders: Vec<String> = convergence
            .monitored
            .iter()
            .filter(|m| m.psrf.map(|v| v >= PSRF_THRESHOLD).unwrap_or(false))
            .map(|m| format!("{} ({:.3})", m.name, m.psrf.unwrap()))
            .collect();
        warn!(
            "convergence diagnostic above threshold {}: {}",
            PSRF_THRESHOLD,
            offenders.join(", ")
        );
    }
    let header = ArchiveHeader {
        dims,
        n_chains: cfg.n_chains,
        samples_per_chain: cfg.samples_per_chain(),
        thin: cfg.thin,
        seed: cfg.seed,
        config_sha256: sampler_config_hash(cfg, prior),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        variables: Vec::new(),
        convergence,
    };
    Ok(PosteriorArchive { header, chains })
}
