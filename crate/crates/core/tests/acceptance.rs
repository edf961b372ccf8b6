//! Acceptance gate: eleven numbered criteria covering conditional/joint
//! model equivalence, the sparse Cholesky engine, the GMRF sampler, the
//! three-regime MCMC, and the posterior analysis products.
//!
//! This target uses its own harness so that every criterion prints exactly
//! one PASS/FAIL line with its runtime and a short measurement summary:
//!
//! ```text
//! cargo test -p mvmrf --test acceptance            # all criteria
//! cargo test -p mvmrf --test acceptance -- 7 9     # a subset
//! ```
//!
//! The process exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra as na;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mvmrf::analysis::{
    contour_ellipse, hierarchical_cluster, joint_probability, symmetrized_kl, Direction,
    FieldSamples, GridBoxPosterior, Linkage, ProbabilityCondition, Threshold,
};
use mvmrf::archive::{
    ArchiveDims, ArchiveHeader, BlockId, ChainOutput, ConvergenceReport, PosteriorArchive,
    SampleBlocks,
};
use mvmrf::chol::{numeric_factorize, symbolic_factorize, SymbolicFactor};
use mvmrf::cli::{cli_run, EXIT_CONVERGENCE, EXIT_OK};
use mvmrf::dataset::{dataset_from_csv, simulate_dataset, synthetic_covariates, EnsembleCsv,
    SimulationTruth};
use mvmrf::dense::DenseChol;
use mvmrf::lattice::{build_grid_lattice, AdjacencyOrder, StackedLattice};
use mvmrf::model::{draw_observations, draw_state_from_prior, EnsembleDataset, PriorSpec};
use mvmrf::precision::{
    assemble_precision, conditional_coefficient, sample_valid_params_uniform, CoefficientKind,
    DepBox, DependenceParams, PrecisionPattern,
};
use mvmrf::sampler::{
    gibbs_sweep, run_ensemble_analysis, SamplerConfig, SamplerContext,
};

type CriterionResult = Result<String, String>;

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(&str, fn() -> CriterionResult); 11] = [
        ("conditional-specification equivalence", criterion_1),
        ("precision assembly oracle", criterion_2),
        ("sparse Cholesky correctness", criterion_3),
        ("symbolic-reuse performance", criterion_4),
        ("GMRF sampler distribution", criterion_5),
        ("joint-consistency (getting it right)", criterion_6),
        ("synthetic parameter recovery", criterion_7),
        ("cross-dependence asymmetry signature", criterion_8),
        ("frozen-regime acceptance rates", criterion_9),
        ("analysis products", criterion_10),
        ("end-to-end determinism", criterion_11),
    ];
    let mut failures = 0;
    for (idx, (label, run)) in criteria.iter().enumerate() {
        let number = idx + 1;
        if !wanted.is_empty() && !wanted.contains(&number) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        let dt = t0.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {number:2} PASS [{dt:8.2?}] {label}: {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {number:2} FAIL [{dt:8.2?}] {label}: {detail}");
            }
        }
    }
    if failures > 0 {
        println!("acceptance: {failures} criterion(s) FAILED");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !($cond) {
            return Err(format!($($arg)+));
        }
    };
}

fn oops<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Criterion 1 — conditional means/variances from the assembled precision
// match the conditional specification to 1e-12 relative on every small
// fixture lattice (n·p ≤ 32).
// ---------------------------------------------------------------------------

fn criterion_1() -> CriterionResult {
    let fixtures: [(usize, usize, usize); 9] = [
        (2, 2, 1),
        (2, 2, 2),
        (3, 2, 2),
        (2, 2, 3),
        (4, 2, 2),
        (3, 3, 2),
        (4, 4, 2),
        (16, 2, 1),
        (5, 3, 2),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let box_ = DepBox {
        rho_min: -0.25,
        rho_max: 0.25,
        phi_min: -0.25,
        phi_max: 0.25,
    };
    let mut checks = 0usize;
    let mut worst = 0.0f64;
    for &(nx, ny, p) in &fixtures {
        let grid = build_grid_lattice(nx, ny, AdjacencyOrder::Rook).map_err(oops)?;
        let stacked = StackedLattice::new(grid.clone(), p).map_err(oops)?;
        assert!(grid.n() * p <= 32);
        let tau2: Vec<f64> = (0..p).map(|j| [0.7, 1.4, 2.2][j % 3]).collect();
        let params =
            sample_valid_params_uniform(&stacked, &mut rng, &box_, &tau2, 10_000).map_err(oops)?;
        let q = assemble_precision(&stacked, &params).map_err(oops)?;
        let dim = stacked.dim();
        let dense = q.to_dense();
        for i in 0..grid.n() {
            for j in 0..p {
                let v = i * p + j;
                let qvv = dense[v * dim + v];
                // Conditional variance of (i,j) given the rest is 1/Q_vv.
                let var_err = (1.0 / qvv - params.tau2(j)).abs() / params.tau2(j);
                worst = worst.max(var_err);
                ensure!(
                    var_err <= 1e-12,
                    "lattice {nx}x{ny} p={p}: conditional variance at ({i},{j}) off by {var_err:.3e}"
                );
                for k in 0..grid.n() {
                    for l in 0..p {
                        let w = k * p + l;
                        if w == v {
                            continue;
                        }
                        let got = -dense[v * dim + w] / qvv;
                        let expected = if k == i {
                            conditional_coefficient(&params, CoefficientKind::WithinLocation, j, l)
                                .map_err(oops)?
                        } else if grid.neighbors(i).contains(&k) {
                            if l == j {
                                conditional_coefficient(&params, CoefficientKind::WithinLayer, j, j)
                                    .map_err(oops)?
                            } else if i > k {
                                conditional_coefficient(&params, CoefficientKind::Cross, j, l)
                                    .map_err(oops)?
                            } else {
                                // Asymmetric φ is oriented: the (k,i) block of
                                // the precision is the transpose of the (i,k)
                                // block, so the lower-indexed location sees
                                // the transposed coefficient φ_{ℓj}·τ_j/τ_ℓ.
                                params.phi(l, j) * (params.tau2(j) / params.tau2(l)).sqrt()
                            }
                        } else {
                            0.0
                        };
                        let err = (got - expected).abs() / expected.abs().max(1.0);
                        worst = worst.max(err);
                        checks += 1;
                        ensure!(
                            err <= 1e-12,
                            "lattice {nx}x{ny} p={p}: coefficient ({i},{j})←({k},{l}) \
                             got {got}, expected {expected}"
                        );
                    }
                }
            }
        }
    }
    Ok(format!(
        "{} lattices, {checks} coefficient checks, max relative error {worst:.2e}",
        fixtures.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 2 — the hand-assembled 4×4 precision (two-location path, p=2)
// matches `assemble_precision` bitwise and is positive-definite.
// ---------------------------------------------------------------------------

fn criterion_2() -> CriterionResult {
    let grid = build_grid_lattice(2, 1, AdjacencyOrder::Rook).map_err(oops)?;
    let stacked = StackedLattice::new(grid, 2).map_err(oops)?;
    let params = DependenceParams::new(
        2,
        vec![0.1],
        vec![0.2, 0.05, 0.15, 0.3],
        vec![1.0, 1.0],
    )
    .map_err(oops)?;
    let q = assemble_precision(&stacked, &params).map_err(oops)?;
    #[rustfmt::skip]
    let expected: [f64; 16] = [
         1.0,  -0.1,  -0.2,  -0.15,
        -0.1,   1.0,  -0.05, -0.3,
        -0.2,  -0.05,  1.0,  -0.1,
        -0.15, -0.3,  -0.1,   1.0,
    ];
    let dense = q.to_dense();
    for (idx, (&got, &want)) in dense.iter().zip(expected.iter()).enumerate() {
        ensure!(
            got.to_bits() == want.to_bits(),
            "entry {idx}: got {got:?} ({:#x}), want {want:?} ({:#x})",
            got.to_bits(),
            want.to_bits()
        );
    }
    let eigen = na::DMatrix::from_row_slice(4, 4, &dense).symmetric_eigen();
    let min_eig = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure!(min_eig > 0.0, "minimum eigenvalue {min_eig} not positive");
    Ok(format!(
        "16 entries bitwise equal; eigenvalues in [{min_eig:.4}, {:.4}]",
        eigen.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    ))
}

// ---------------------------------------------------------------------------
// Criterion 3 — sparse log-determinants and solves match dense oracles to
// 1e-8 relative on 100 random SPD instances (dim ≤ 200); refactorization
// with a cached symbolic factor is bitwise-identical to a from-scratch
// factorization under the same permutation.
// ---------------------------------------------------------------------------

fn criterion_3() -> CriterionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let box_ = DepBox {
        rho_min: -0.22,
        rho_max: 0.22,
        phi_min: -0.22,
        phi_max: 0.22,
    };
    let mut worst_logdet = 0.0f64;
    let mut worst_solve = 0.0f64;
    let mut max_dim = 0usize;
    for t in 0..100 {
        let nx = rng.random_range(2..=8usize);
        let ny = rng.random_range(2..=8usize);
        let p = rng.random_range(1..=3usize);
        let dim = nx * ny * p;
        assert!(dim <= 200);
        max_dim = max_dim.max(dim);
        let grid = build_grid_lattice(nx, ny, AdjacencyOrder::Rook).map_err(oops)?;
        let stacked = StackedLattice::new(grid, p).map_err(oops)?;
        let tau2: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
        let params =
            sample_valid_params_uniform(&stacked, &mut rng, &box_, &tau2, 10_000).map_err(oops)?;
        let pattern = PrecisionPattern::new(&stacked);
        let q = pattern.assemble(&params).map_err(oops)?;

        let symbolic = SymbolicFactor::analyze(&q);
        let factor = numeric_factorize(&symbolic, &q).map_err(oops)?;

        let dm = na::DMatrix::from_row_slice(dim, dim, &q.to_dense());
        let chol = dm
            .cholesky()
            .ok_or_else(|| format!("instance {t}: dense oracle found the matrix not PD"))?;
        let ld_dense: f64 = (0..dim).map(|i| chol.l()[(i, i)].ln()).sum::<f64>() * 2.0;
        let ld_err = (factor.log_det() - ld_dense).abs() / ld_dense.abs().max(1.0);
        worst_logdet = worst_logdet.max(ld_err);
        ensure!(
            ld_err <= 1e-8,
            "instance {t} (dim {dim}): log_det off by {ld_err:.3e}"
        );

        let rhs: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xs = factor.solve(&rhs).map_err(oops)?;
        let xd = chol.solve(&na::DVector::from_column_slice(&rhs));
        let num: f64 = xs
            .iter()
            .zip(xd.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den: f64 = xd.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let solve_err = num / den;
        worst_solve = worst_solve.max(solve_err);
        ensure!(
            solve_err <= 1e-8,
            "instance {t} (dim {dim}): solve off by {solve_err:.3e} relative"
        );

        // Refactorize different values through the cached symbolic factor
        // and compare bitwise against a from-scratch factorization that is
        // pinned to the same permutation.
        let mut bumped = params.clone();
        for j in 0..p {
            bumped.set_tau2(j, params.tau2(j) * 1.25);
        }
        let q2 = pattern.assemble(&bumped).map_err(oops)?;
        let reused = numeric_factorize(&symbolic, &q2).map_err(oops)?;
        let fresh_symbolic = symbolic_factorize(q2.pattern_arc(), symbolic.perm().to_vec());
        let fresh = numeric_factorize(&fresh_symbolic, &q2).map_err(oops)?;
        ensure!(
            reused.l_values().len() == fresh.l_values().len()
                && reused
                    .l_values()
                    .iter()
                    .zip(fresh.l_values().iter())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
            "instance {t} (dim {dim}): cached-symbolic refactorization not bitwise-identical"
        );
    }
    Ok(format!(
        "100 instances (max dim {max_dim}); worst log-det error {worst_logdet:.2e}, \
         worst solve error {worst_solve:.2e}; refactorizations bitwise-identical"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 4 — on the 44×56, p=2 lattice (dim 4928), 100 numeric
// refactorizations with a cached symbolic factor run at least 2× faster
// than 100 full symbolic+numeric factorizations.
// ---------------------------------------------------------------------------

fn criterion_4() -> CriterionResult {
    let grid = build_grid_lattice(44, 56, AdjacencyOrder::Rook).map_err(oops)?;
    let stacked = StackedLattice::new(grid, 2).map_err(oops)?;
    let params = DependenceParams::new(
        2,
        vec![-0.15],
        vec![0.12, 0.05, 0.03, 0.12],
        vec![0.9, 1.1],
    )
    .map_err(oops)?;
    let base = assemble_precision(&stacked, &params).map_err(oops)?;
    let variant = |k: usize| base.scaled(1.0 + (k as f64) * 1e-4);

    // Warm both paths before timing.
    let cached_symbolic = SymbolicFactor::analyze(&base);
    numeric_factorize(&cached_symbolic, &base).map_err(oops)?;

    let reps = 100;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for k in 0..reps {
        let q = variant(k);
        let symbolic = SymbolicFactor::analyze(&q);
        let factor = numeric_factorize(&symbolic, &q).map_err(oops)?;
        sink += factor.log_det();
    }
    let full = t0.elapsed();

    let t1 = Instant::now();
    for k in 0..reps {
        let q = variant(k);
        let factor = numeric_factorize(&cached_symbolic, &q).map_err(oops)?;
        sink += factor.log_det();
    }
    let cached = t1.elapsed();
    std::hint::black_box(sink);

    let speedup = full.as_secs_f64() / cached.as_secs_f64();
    ensure!(
        speedup >= 2.0,
        "cached path only {speedup:.2}× faster (full {full:.2?}, cached {cached:.2?})"
    );
    Ok(format!(
        "dim {}, {} refactorizations: full {full:.2?}, cached {cached:.2?} ({speedup:.1}× faster)",
        stacked.dim(),
        reps
    ))
}

// ---------------------------------------------------------------------------
// Criterion 5 — the empirical covariance of 2·10⁵ GMRF draws on a 4×4
// lattice (p=2) matches the dense inverse of the precision entrywise to
// within ±4 standard errors.
// ---------------------------------------------------------------------------

fn criterion_5() -> CriterionResult {
    let grid = build_grid_lattice(4, 4, AdjacencyOrder::Rook).map_err(oops)?;
    let stacked = StackedLattice::new(grid, 2).map_err(oops)?;
    let params = DependenceParams::new(
        2,
        vec![-0.2],
        vec![0.15, 0.10, 0.05, 0.15],
        vec![1.0, 1.5],
    )
    .map_err(oops)?;
    let q = assemble_precision(&stacked, &params).map_err(oops)?;
    let dim = stacked.dim();
    let symbolic = SymbolicFactor::analyze(&q);
    let factor = numeric_factorize(&symbolic, &q).map_err(oops)?;

    let mean: Vec<f64> = (0..dim).map(|v| 0.1 * (v % 5) as f64).collect();
    let n_draws = 200_000usize;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut sum = vec![0.0f64; dim];
    let mut cross = vec![0.0f64; dim * dim];
    for _ in 0..n_draws {
        let x = factor.sample_gmrf(&mean, &mut rng);
        for a in 0..dim {
            sum[a] += x[a];
            let xa = x[a];
            for b in a..dim {
                cross[a * dim + b] += xa * x[b];
            }
        }
    }
    let nf = n_draws as f64;
    let sigma = DenseChol::new(&q.to_dense(), dim).map_err(oops)?.inverse();
    let mut max_z = 0.0f64;
    for a in 0..dim {
        for b in a..dim {
            let s_ab = (cross[a * dim + b] - sum[a] * sum[b] / nf) / (nf - 1.0);
            let truth = sigma[a * dim + b];
            let se = ((sigma[a * dim + a] * sigma[b * dim + b] + truth * truth) / nf).sqrt();
            let z = (s_ab - truth).abs() / se;
            max_z = max_z.max(z);
            ensure!(
                z <= 4.0,
                "covariance entry ({a},{b}): sample {s_ab:.5}, true {truth:.5}, |z| = {z:.2}"
            );
        }
    }
    Ok(format!(
        "{n_draws} draws, dim {dim}, {} covariance entries, max |z| = {max_z:.2}",
        dim * (dim + 1) / 2
    ))
}

// ---------------------------------------------------------------------------
// Criterion 6 — joint-consistency ("getting it right"): marginal-conditional
// and successive-conditional simulators agree on all monitored scalars with
// |z| < 4 over 10⁴ coupled samples (3×3 lattice, p=2, m=2).
// ---------------------------------------------------------------------------

fn criterion_6() -> CriterionResult {
    let grid = build_grid_lattice(3, 3, AdjacencyOrder::Rook).map_err(oops)?;
    let (lat, lon, elev) = synthetic_covariates(&grid);
    let n = grid.n();
    let m = 2;
    let p = 2;
    let csv = EnsembleCsv {
        m,
        p,
        grid_x: (0..n).map(|i| grid.grid_coords(i).0).collect(),
        grid_y: (0..n).map(|i| grid.grid_coords(i).1).collect(),
        latitude: lat,
        longitude: lon,
        elevation: elev,
        y: vec![0.0; m * p * n],
    };
    let mut data = dataset_from_csv(&csv, 3, 3, AdjacencyOrder::Rook).map_err(oops)?;
    let prior = PriorSpec {
        sigma2_alpha: 0.5,
        sigma2_beta: 0.5,
        sigma2_h: 0.5,
        sigma2_shape0: 4.0,
        sigma2_rate0: 1.0,
        log_tau2_min: -0.7,
        log_tau2_max: 0.7,
        ..PriorSpec::default()
    };
    let ctx = SamplerContext::new(data.lattice());
    let names = [
        "rho(0,1)", "phi(0,0)", "phi(0,1)", "phi(1,0)", "phi(1,1)", "log tau2(0)",
        "log tau2(1)", "sigma2(0)", "sigma2(1)", "sigma2_b", "alpha(0,0)", "alpha(1,2)",
        "beta_bar(0)", "beta_bar(1)", "mean h_bar", "mean y",
    ];
    let scalars = |state: &mvmrf::model::ModelState, y: &[f64]| -> Vec<f64> {
        vec![
            state.dep.rho(0, 1),
            state.dep.phi(0, 0),
            state.dep.phi(0, 1),
            state.dep.phi(1, 0),
            state.dep.phi(1, 1),
            state.dep.tau2(0).ln(),
            state.dep.tau2(1).ln(),
            state.sigma2[0],
            state.sigma2[1],
            state.sigma2_b,
            state.alpha[0],
            state.alpha[5],
            state.beta_bar[0],
            state.beta_bar[1],
            state.h_bar.iter().sum::<f64>() / state.h_bar.len() as f64,
            y.iter().sum::<f64>() / y.len() as f64,
        ]
    };

    let k_samples = 10_000usize;
    let n_scalars = names.len();

    // Marginal-conditional: independent draws of (state, y) from the prior
    // and the data model.
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let mut marginal: Vec<Vec<f64>> = vec![Vec::with_capacity(k_samples); n_scalars];
    for _ in 0..k_samples {
        let state = draw_state_from_prior(&data, &prior, ctx.pattern(), ctx.symbolic(), &mut rng, 100_000)
            .map_err(oops)?;
        let y = draw_observations(&data, &state, &mut rng);
        for (dst, v) in marginal.iter_mut().zip(scalars(&state, &y)) {
            dst.push(v);
        }
    }

    // Successive-conditional: alternate y | state with one full posterior
    // sweep of state | y; the chain starts at stationarity.
    let mut rng = ChaCha8Rng::seed_from_u64(67);
    let mut state =
        draw_state_from_prior(&data, &prior, ctx.pattern(), ctx.symbolic(), &mut rng, 100_000)
            .map_err(oops)?;
    let scales = vec![0.15; 7];
    let mut successive: Vec<Vec<f64>> = vec![Vec::with_capacity(k_samples); n_scalars];
    for _ in 0..k_samples {
        let y = draw_observations(&data, &state, &mut rng);
        data.set_y(y.clone()).map_err(oops)?;
        gibbs_sweep(&data, &mut state, &prior, &ctx, &scales, &mut rng).map_err(oops)?;
        for (dst, v) in successive.iter_mut().zip(scalars(&state, &y)) {
            dst.push(v);
        }
    }

    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let var = |xs: &[f64], mu: f64| {
        xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64
    };
    let mut max_z = 0.0f64;
    let mut worst = "";
    for s in 0..n_scalars {
        let m1 = mean(&marginal[s]);
        let se1 = (var(&marginal[s], m1) / k_samples as f64).sqrt();
        let m2 = mean(&successive[s]);
        // The successive chain is autocorrelated: batch means.
        let n_batches = 100;
        let batch = k_samples / n_batches;
        let batch_means: Vec<f64> = (0..n_batches)
            .map(|b| mean(&successive[s][b * batch..(b + 1) * batch]))
            .collect();
        let se2 = (var(&batch_means, mean(&batch_means)) / n_batches as f64).sqrt();
        let z = (m1 - m2).abs() / (se1 * se1 + se2 * se2).sqrt();
        if z > max_z {
            max_z = z;
            worst = names[s];
        }
        ensure!(
            z < 4.0,
            "scalar {}: marginal {m1:.4} vs successive {m2:.4}, |z| = {z:.2}",
            names[s]
        );
    }
    Ok(format!(
        "{n_scalars} scalars × {k_samples} coupled samples, max |z| = {max_z:.2} ({worst})"
    ))
}

// ---------------------------------------------------------------------------
// Criteria 7–9 share one synthetic-recovery run: 10×10 lattice, p=2, m=5,
// 4 chains of (500, 2000, 2000) regime iterations.
// ---------------------------------------------------------------------------

fn recovery_truth(phi12: f64, phi21: f64) -> SimulationTruth {
    SimulationTruth {
        alpha: vec![0.5, -0.2, 0.1, 1.0, 0.3, -0.4],
        beta_bar: vec![2.0, 1.5],
        sigma2: vec![0.25, 0.25],
        sigma2_b: 0.1,
        sigma2_h: 4.0,
        dep: DependenceParams::new(2, vec![-0.2], vec![0.15, phi12, phi21, 0.15], vec![1.0, 1.0])
            .expect("fixture parameters are well-formed"),
    }
}

fn run_recovery(
    truth: &SimulationTruth,
    n_chains: usize,
    sim_seed: u64,
    chain_seed: u64,
) -> Result<PosteriorArchive, String> {
    let grid = build_grid_lattice(10, 10, AdjacencyOrder::Rook).map_err(oops)?;
    let sim = simulate_dataset(truth, &grid, 5, sim_seed).map_err(oops)?;
    let data = dataset_from_csv(&sim.csv, 10, 10, AdjacencyOrder::Rook).map_err(oops)?;
    let cfg = SamplerConfig {
        n_chains,
        regime1_iters: 500,
        regime2_iters: 2000,
        regime3_iters: 2000,
        thin: 10,
        seed: chain_seed,
        ..SamplerConfig::default()
    };
    // Weakly-informative proper variance priors. Under the improper default
    // (shape 0, rate 0), a five-member ensemble leaves σ_b² informed by only
    // ten member intercepts and chains can collapse into an absorbing state
    // near σ_b² = 0, which is a property of that prior, not of the sampler.
    let prior = PriorSpec {
        sigma2_shape0: 3.0,
        sigma2_rate0: 0.75,
        sigma2_beta: 25.0,
        sigma2_h: 4.0,
        ..PriorSpec::default()
    };
    run_ensemble_analysis(&cfg, &data, &prior).map_err(oops)
}

static RECOVERY: OnceLock<Result<PosteriorArchive, String>> = OnceLock::new();

fn recovery_archive() -> Result<&'static PosteriorArchive, String> {
    RECOVERY
        .get_or_init(|| run_recovery(&recovery_truth(0.10, 0.05), 4, 20240814, 99))
        .as_ref()
        .map_err(Clone::clone)
}

fn pooled_mean_sd(archive: &PosteriorArchive, id: BlockId, col: usize) -> (f64, f64) {
    let block = archive.pooled(id);
    let xs = block.column(col);
    let mu = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = (xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / (xs.len() - 1) as f64).sqrt();
    (mu, sd)
}

fn criterion_7() -> CriterionResult {
    let archive = recovery_archive()?;
    let truth = recovery_truth(0.10, 0.05);
    let targets: [(&str, BlockId, usize, f64); 7] = [
        ("rho(0,1)", BlockId::Rho, 0, truth.dep.rho(0, 1)),
        ("phi(0,0)", BlockId::Phi, 0, truth.dep.phi(0, 0)),
        ("phi(0,1)", BlockId::Phi, 1, truth.dep.phi(0, 1)),
        ("phi(1,0)", BlockId::Phi, 2, truth.dep.phi(1, 0)),
        ("phi(1,1)", BlockId::Phi, 3, truth.dep.phi(1, 1)),
        ("sigma2(0)", BlockId::Sigma2, 0, truth.sigma2[0]),
        ("sigma2(1)", BlockId::Sigma2, 1, truth.sigma2[1]),
    ];
    let mut parts = Vec::new();
    for (name, block, col, want) in targets {
        let (mu, sd) = pooled_mean_sd(archive, block, col);
        let dev = (mu - want).abs() / sd;
        ensure!(
            dev <= 3.0,
            "{name}: posterior {mu:.4} ± {sd:.4} vs truth {want}, {dev:.2} posterior sd away"
        );
        parts.push(format!("{name} {mu:.3}±{sd:.3} (truth {want}, {dev:.1}σ)"));
    }
    let conv = &archive.header.convergence;
    ensure!(conv.evaluated, "convergence was not evaluated");
    let mut max_psrf = 0.0f64;
    for mon in &conv.monitored {
        match mon.psrf {
            Some(v) => max_psrf = max_psrf.max(v),
            None => return Err(format!("monitored scalar {} has degenerate PSRF", mon.name)),
        }
    }
    ensure!(
        max_psrf < 1.1 && conv.converged,
        "PSRF reached {max_psrf:.3} (threshold 1.1)"
    );
    Ok(format!("{}; max PSRF {max_psrf:.3}", parts.join(", ")))
}

fn criterion_8() -> CriterionResult {
    let frac_greater = |archive: &PosteriorArchive| -> f64 {
        let phi = archive.pooled(BlockId::Phi);
        let phi12 = phi.column(1);
        let phi21 = phi.column(2);
        let hits = phi12
            .iter()
            .zip(phi21.iter())
            .filter(|(a, b)| a > b)
            .count();
        hits as f64 / phi12.len() as f64
    };
    let p_base = frac_greater(recovery_archive()?);
    ensure!(
        p_base > 0.5,
        "with truth gap (0.10, 0.05): P(phi12 > phi21) = {p_base:.3} ≤ 0.5"
    );
    let wide = run_recovery(&recovery_truth(0.15, 0.0), 2, 20240814, 1234)?;
    let p_wide = frac_greater(&wide);
    ensure!(
        p_wide > 0.8,
        "with truth gap (0.15, 0.0): P(phi12 > phi21) = {p_wide:.3} ≤ 0.8"
    );
    Ok(format!(
        "P(phi12 > phi21) = {p_base:.3} at gap (0.10, 0.05); {p_wide:.3} at gap (0.15, 0.0)"
    ))
}

fn criterion_9() -> CriterionResult {
    let archive = recovery_archive()?;
    let mut pooled: std::collections::BTreeMap<String, (u64, u64)> = Default::default();
    for chain in &archive.chains {
        for rec in &chain.acceptance_log {
            if rec.regime == 3 {
                let e = pooled.entry(rec.block.clone()).or_default();
                e.0 += rec.proposed;
                e.1 += rec.accepted;
            }
        }
    }
    ensure!(!pooled.is_empty(), "no frozen-regime acceptance records");
    let mut parts = Vec::new();
    for (block, (proposed, accepted)) in &pooled {
        let rate = *accepted as f64 / *proposed as f64;
        ensure!(
            (0.10..=0.35).contains(&rate),
            "block {block}: frozen-regime acceptance {rate:.3} outside [0.10, 0.35]"
        );
        parts.push(format!("{block} {rate:.3}"));
    }
    Ok(format!("target 0.20: {}", parts.join(", ")))
}

// ---------------------------------------------------------------------------
// Criterion 10 — analysis products: symmetrized-KL goldens, the 95%
// contour radius for Σ=I, exact recovery of a planted two-cluster split,
// and joint ≤ marginal probabilities everywhere.
// ---------------------------------------------------------------------------

/// An in-memory archive/dataset pair on an nx×ny grid (p=2, m=2) whose
/// mean-change field at sample s is given by `h_bar_row(s)`.
fn toy_field(
    nx: usize,
    ny: usize,
    n_samples: usize,
    mut h_bar_row: impl FnMut(usize) -> Vec<f64>,
) -> Result<(PosteriorArchive, EnsembleDataset), String> {
    let p = 2;
    let m = 2;
    let grid = build_grid_lattice(nx, ny, AdjacencyOrder::Rook).map_err(oops)?;
    let n = grid.n();
    let (lat, lon, elev) = synthetic_covariates(&grid);
    let csv = EnsembleCsv {
        m,
        p,
        grid_x: (0..n).map(|i| grid.grid_coords(i).0).collect(),
        grid_y: (0..n).map(|i| grid.grid_coords(i).1).collect(),
        latitude: lat,
        longitude: lon,
        elevation: elev,
        y: vec![0.0; m * p * n],
    };
    let data = dataset_from_csv(&csv, nx, ny, AdjacencyOrder::Rook).map_err(oops)?;
    let dims = ArchiveDims { nx, ny, p, m, q1: 3, q2: 1 };
    let mut blocks = SampleBlocks::empty(&dims);
    for s in 0..n_samples {
        let row = h_bar_row(s);
        assert_eq!(row.len(), n * p);
        blocks.alpha.push_row(&vec![0.0; p * 3]);
        blocks.beta_r.push_row(&vec![0.0; m * p]);
        blocks.beta_bar.push_row(&vec![0.0; p]);
        blocks.sigma2.push_row(&[1.0, 1.0]);
        blocks.sigma2_b.push_row(&[1.0]);
        blocks.rho.push_row(&[0.0]);
        blocks.phi.push_row(&vec![0.0; p * p]);
        blocks.tau2.push_row(&[1.0, 1.0]);
        blocks.h_bar.push_row(&row);
        blocks.h_r.push_row(&vec![0.0; m * n * p]);
    }
    let archive = PosteriorArchive {
        header: ArchiveHeader {
            dims,
            n_chains: 1,
            samples_per_chain: n_samples,
            thin: 1,
            seed: 0,
            config_sha256: String::new(),
            library_version: "acceptance".into(),
            variables: vec!["a".into(), "b".into()],
            convergence: ConvergenceReport::not_evaluated(),
        },
        chains: vec![ChainOutput {
            chain_id: 0,
            acceptance_log: Vec::new(),
            proposal_history: Vec::new(),
            samples: blocks,
        }],
    };
    Ok((archive, data))
}

fn criterion_10() -> CriterionResult {
    // Symmetrized-KL goldens.
    let zero = symmetrized_kl(&[0.3, -0.7], &[2.0, 0.3, 0.3, 1.0], &[0.3, -0.7], &[2.0, 0.3, 0.3, 1.0])
        .map_err(oops)?;
    ensure!(zero.abs() <= 1e-12, "identical Gaussians gave KL {zero:e}");
    let unit = symmetrized_kl(&[0.0], &[1.0], &[1.0], &[1.0]).map_err(oops)?;
    ensure!(
        (unit - 1.0).abs() <= 1e-12,
        "N(0,1) vs N(1,1) gave {unit}, want 1.0"
    );

    // 95% contour radius for the identity covariance.
    let post = GridBoxPosterior {
        location: 0,
        mean: vec![0.0, 0.0],
        cov: vec![1.0, 0.0, 0.0, 1.0],
    };
    let pts = contour_ellipse(&post, 0.95, 256).map_err(oops)?;
    let mut worst_radius = 0.0f64;
    for (x, y) in &pts {
        let r = (x * x + y * y).sqrt();
        worst_radius = worst_radius.max((r - 2.4477).abs());
    }
    ensure!(
        worst_radius <= 1e-3,
        "contour radius deviates from 2.4477 by {worst_radius:.2e}"
    );

    // Planted two-cluster structure is recovered exactly.
    let mut posts = Vec::new();
    for t in 0..4 {
        posts.push(GridBoxPosterior {
            location: t,
            mean: vec![0.02 * t as f64, -0.01 * t as f64],
            cov: vec![1.0, 0.1, 0.1, 1.0],
        });
    }
    for t in 0..4 {
        posts.push(GridBoxPosterior {
            location: 4 + t,
            mean: vec![6.0 + 0.02 * t as f64, 6.0 - 0.03 * t as f64],
            cov: vec![1.5, -0.2, -0.2, 1.2],
        });
    }
    for linkage in [Linkage::Average, Linkage::Complete] {
        let (labels, _) = hierarchical_cluster(&posts, linkage, 2).map_err(oops)?;
        ensure!(
            labels[..4].iter().all(|&l| l == labels[0])
                && labels[4..].iter().all(|&l| l == labels[4])
                && labels[0] != labels[4],
            "planted clusters not recovered under {linkage:?}: {labels:?}"
        );
    }

    // Joint probability never exceeds any of its marginals.
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let mut fixtures: Vec<(PosteriorArchive, EnsembleDataset)> = Vec::new();
    for _ in 0..3 {
        let (a, d) = toy_field(4, 3, 60, |_| {
            (0..24).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
        })?;
        fixtures.push((a, d));
    }
    fixtures.push(toy_field(4, 3, 5, |_| (0..24).map(|v| v as f64).collect())?);
    let condition_sets: [Vec<ProbabilityCondition>; 2] = [
        vec![
            ProbabilityCondition {
                variable: 0,
                direction: Direction::Above,
                threshold: Threshold::Named(mvmrf::analysis::NamedThreshold::GlobalMedian),
            },
            ProbabilityCondition {
                variable: 1,
                direction: Direction::Above,
                threshold: Threshold::Named(mvmrf::analysis::NamedThreshold::GlobalMedian),
            },
        ],
        vec![
            ProbabilityCondition {
                variable: 0,
                direction: Direction::Above,
                threshold: Threshold::Value(0.2),
            },
            ProbabilityCondition {
                variable: 1,
                direction: Direction::Below,
                threshold: Threshold::Value(0.1),
            },
        ],
    ];
    let mut boxes_checked = 0usize;
    for (archive, data) in &fixtures {
        let field = FieldSamples::from_archive(archive, data).map_err(oops)?;
        for conditions in &condition_sets {
            let joint = joint_probability(&field, conditions).map_err(oops)?;
            for single in conditions {
                let marginal = joint_probability(&field, std::slice::from_ref(single))
                    .map_err(oops)?;
                for (i, (j, g)) in joint.iter().zip(marginal.iter()).enumerate() {
                    ensure!(
                        j <= g,
                        "box {i}: joint probability {j} exceeds marginal {g}"
                    );
                    boxes_checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "KL goldens exact; contour radius within {worst_radius:.1e} of 2.4477; \
         planted clusters recovered; joint ≤ marginal at {boxes_checked} box-condition pairs"
    ))
}

// ---------------------------------------------------------------------------
// Criterion 11 — the full simulate → sample → summarize pipeline is
// byte-deterministic: repeating it with the same seed reproduces every
// artifact exactly.
// ---------------------------------------------------------------------------

fn criterion_11() -> CriterionResult {
    let dir = tempfile::tempdir().map_err(oops)?;
    let config_path = dir.path().join("run.toml");
    std::fs::write(
        &config_path,
        r#"
            [lattice]
            nx = 6
            ny = 5

            [[variables]]
            name = "temperature"

            [[variables]]
            name = "precipitation"

            [data]
            path = "ensemble.csv"

            [output]
            dir = "out"

            [sampler]
            n_chains = 2
            regime1_iters = 150
            regime2_iters = 250
            regime3_iters = 250
            thin = 10
            adapt_interval = 50
            seed = 31415

            [simulate]
            m = 3
            alpha = [[0.5, -0.2, 0.1], [1.0, 0.3, -0.4]]
            beta_bar = [[2.0], [1.5]]
            sigma2 = [0.25, 0.25]
            sigma2_b = 0.1
            sigma2_h = 2.0
            rho = [-0.2]
            phi = [[0.15, 0.10], [0.05, 0.15]]
            tau2 = [1.0, 1.0]

            [[analysis.probability]]
            variable = "temperature"
            direction = "above"

            [[analysis.probability]]
            variable = "precipitation"
            direction = "above"

            [[analysis.joint]]
            conditions = [
                { variable = 0, direction = "above" },
                { variable = 1, direction = "above" },
            ]

            [[analysis.conditional]]
            condition_variable = 0
            condition_quartile = 4
            target_variable = 1
            target_quartile = 4

            [analysis.cluster]
            k = 2

            [analysis.contour]
            boxes = [0]
            resolution = 32
        "#,
    )
    .map_err(oops)?;
    let cfg = config_path.to_str().unwrap();

    let artifacts = [
        "ensemble.csv",
        "ensemble.truth.json",
        "out/posterior.mvmf",
        "out/posterior_summary.csv",
        "out/probability.csv",
        "out/joint_probability.csv",
        "out/conditional_probability.csv",
        "out/clusters.csv",
        "out/cluster_merges.csv",
        "out/contours.csv",
    ];
    let run_all = || -> Result<(i32, Vec<Vec<u8>>), String> {
        let mut sink = Vec::new();
        let code = cli_run(["mvmrf", "simulate", "--config", cfg], &mut sink);
        ensure!(code == EXIT_OK, "simulate exited {code}");
        let sample_code = cli_run(["mvmrf", "sample", "--config", cfg], &mut sink);
        ensure!(
            sample_code == EXIT_OK || sample_code == EXIT_CONVERGENCE,
            "sample exited {sample_code}"
        );
        let code = cli_run(["mvmrf", "summarize", "--config", cfg], &mut sink);
        ensure!(code == EXIT_OK, "summarize exited {code}");
        let mut bytes = Vec::new();
        for name in &artifacts {
            bytes.push(std::fs::read(dir.path().join(name)).map_err(|e| format!("{name}: {e}"))?);
        }
        Ok((sample_code, bytes))
    };

    let (code_a, first) = run_all()?;
    let (code_b, second) = run_all()?;
    ensure!(code_a == code_b, "sample exit codes differ: {code_a} vs {code_b}");
    for ((name, a), b) in artifacts.iter().zip(&first).zip(&second) {
        ensure!(
            a == b,
            "{name} differs between runs ({} vs {} bytes)",
            a.len(),
            b.len()
        );
    }
    Ok(format!(
        "{} artifacts byte-identical across repeated runs (sample exit {code_a})",
        artifacts.len()
    ))
}
