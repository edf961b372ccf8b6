//! Posterior field summaries: probability maps, Gaussian grid-box
//! posteriors, symmetrized-KL hierarchical clustering, and contour
//! ellipses.
//!
//! Everything here is a pure function over [`FieldSamples`]: the posterior
//! draws of the mean-change field X1·α + X2·β̄ + h̄ evaluated at every grid
//! box, materialized once from an archive and a dataset. Probability maps
//! count samples satisfying per-variable threshold events; grid-box
//! posteriors condense each box into a p-variate Gaussian (sample mean and
//! covariance) which feed the clustering and the contour ellipses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{BlockId, PosteriorArchive};
use crate::dense::{DenseChol, DenseError};
use crate::model::EnsembleDataset;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("archive contains no samples")]
    EmptyArchive,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("archive/dataset mismatch: {what}")]
    DimensionMismatch { what: String },
    #[error("variable index {got} out of range (p = {p})")]
    VariableOutOfRange { got: usize, p: usize },
    #[error("covariance at grid box {location} is singular or not positive-definite")]
    DegenerateBox { location: usize },
    #[error("cluster count {k} out of range 1..={n}")]
    BadClusterCount { k: usize, n: usize },
    #[error("operation requires two variables (got p = {p})")]
    NotBivariate { p: usize },
    #[error("contour level must be in (0, 1), got {level}")]
    BadLevel { level: f64 },
    #[error("contour resolution must be at least 3, got {got}")]
    BadResolution { got: usize },
    #[error("quartile index {q} out of range 1..=4")]
    BadQuartile { q: u8 },
    #[error("covariance is singular or not positive-definite: {0}")]
    Dense(#[from] DenseError),
}

// ---------------------------------------------------------------------------
// Request vocabulary (shared with run configuration)
// ---------------------------------------------------------------------------

/// Side of a threshold event. Comparisons are strict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Above,
    Below,
}

/// Named threshold rules resolved against the archive itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NamedThreshold {
    /// Median of the variable over all samples and all grid boxes.
    GlobalMedian,
}

/// A threshold: either a fixed value or a named data-driven rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Threshold {
    Value(f64),
    Named(NamedThreshold),
}

/// One per-variable event in a probability query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityCondition {
    pub variable: usize,
    pub direction: Direction,
    pub threshold: Threshold,
}

/// Where quartile boundaries come from in conditional queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuartileScope {
    /// Each box conditions on its own sample quartiles (default: keeps the
    /// conditioning non-degenerate for boxes far from the global spread).
    PerBox,
    /// Quartiles of the pooled samples across all boxes.
    Global,
}

/// Linkage rule for agglomerative clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    Average,
    Complete,
}

// ---------------------------------------------------------------------------
// Field samples
// ---------------------------------------------------------------------------

/// Posterior draws of the mean-change field at every grid box:
/// `n_samples` draws of X1·α_j + X2·β̄_j + h̄_{ij}, stored sample-major with
/// the stacked-lattice layout (box i, variable j) ↦ `i·p + j` inside a draw.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSamples {
    n: usize,
    p: usize,
    n_samples: usize,
    data: Vec<f64>,
}

impl FieldSamples {
    /// Materializes the field from the pooled archive blocks and the
    /// dataset's covariates.
    pub fn from_archive(
        archive: &PosteriorArchive,
        data: &EnsembleDataset,
    ) -> Result<Self, AnalysisError> {
        let dims = &archive.header.dims;
        let (n, p, q1, q2) = (data.n(), data.p(), data.q1(), data.q2());
        let grid = data.lattice().grid();
        if dims.nx != grid.nx()
            || dims.ny != grid.ny()
            || dims.p != p
            || dims.q1 != q1
            || dims.q2 != q2
        {
            return Err(AnalysisError::DimensionMismatch {
                what: format!(
                    "archive is {}×{} with p={}, q1={}, q2={}; dataset is {}×{} with p={}, q1={}, q2={}",
                    dims.nx, dims.ny, dims.p, dims.q1, dims.q2,
                    grid.nx(), grid.ny(), p, q1, q2
                ),
            });
        }
        let alpha = archive.pooled(BlockId::Alpha);
        let beta_bar = archive.pooled(BlockId::BetaBar);
        let h_bar = archive.pooled(BlockId::HBar);
        let n_samples = alpha.rows();
        if n_samples == 0 {
            return Err(AnalysisError::EmptyArchive);
        }
        let mut out = vec![0.0; n_samples * n * p];
        for s in 0..n_samples {
            let a = alpha.row(s);
            let b = beta_bar.row(s);
            let h = h_bar.row(s);
            let base = s * n * p;
            for i in 0..n {
                let x1 = data.x1_row(i);
                let x2 = data.x2_row(i);
                for j in 0..p {
                    let mut v = h[i * p + j];
                    for (x, c) in x1.iter().zip(&a[j * q1..(j + 1) * q1]) {
                        v += x * c;
                    }
                    for (x, c) in x2.iter().zip(&b[j * q2..(j + 1) * q2]) {
                        v += x * c;
                    }
                    out[base + i * p + j] = v;
                }
            }
        }
        Ok(FieldSamples {
            n,
            p,
            n_samples,
            data: out,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    /// Field value for draw `s` at box `i`, variable `j`.
    pub fn value(&self, s: usize, i: usize, j: usize) -> f64 {
        self.data[s * self.n * self.p + i * self.p + j]
    }

    fn check_variable(&self, j: usize) -> Result<(), AnalysisError> {
        if j >= self.p {
            return Err(AnalysisError::VariableOutOfRange { got: j, p: self.p });
        }
        Ok(())
    }

    /// All draws of variable `j` at box `i`.
    pub fn series(&self, i: usize, j: usize) -> Vec<f64> {
        (0..self.n_samples).map(|s| self.value(s, i, j)).collect()
    }

    /// All draws of variable `j` pooled over every box.
    fn pooled_variable(&self, j: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_samples * self.n);
        for s in 0..self.n_samples {
            for i in 0..self.n {
                v.push(self.value(s, i, j));
            }
        }
        v
    }
}

// ---------------------------------------------------------------------------
// Order statistics
// ---------------------------------------------------------------------------

/// Median with the usual midpoint convention for even counts.
fn median_of(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_unstable_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Lower empirical quantile: the ⌈q·n⌉-th order statistic.
fn lower_quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let k = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[k - 1]
}

/// Quartile cut points (c25, c50, c75) of a sample.
fn quartile_cuts(mut v: Vec<f64>) -> (f64, f64, f64) {
    assert!(!v.is_empty());
    v.sort_unstable_by(f64::total_cmp);
    (
        lower_quantile(&v, 0.25),
        lower_quantile(&v, 0.50),
        lower_quantile(&v, 0.75),
    )
}

/// Quartile bin of `x` under cuts `(c25, c50, c75)`: 1 for x ≤ c25,
/// 2 for c25 < x ≤ c50, 3 for c50 < x ≤ c75, 4 for x > c75.
fn quartile_bin(x: f64, cuts: (f64, f64, f64)) -> u8 {
    if x <= cuts.0 {
        1
    } else if x <= cuts.1 {
        2
    } else if x <= cuts.2 {
        3
    } else {
        4
    }
}

// ---------------------------------------------------------------------------
// Probability maps
// ---------------------------------------------------------------------------

fn resolve_threshold(
    field: &FieldSamples,
    variable: usize,
    threshold: Threshold,
) -> f64 {
    match threshold {
        Threshold::Value(v) => v,
        Threshold::Named(NamedThreshold::GlobalMedian) => {
            median_of(field.pooled_variable(variable))
        }
    }
}

fn satisfies(v: f64, direction: Direction, threshold: f64) -> bool {
    match direction {
        Direction::Above => v > threshold,
        Direction::Below => v < threshold,
    }
}

/// Per-box probability that `variable` is strictly above/below the
/// threshold; the global-median rule resolves against all samples at all
/// boxes of that variable.
pub fn pointwise_probability(
    field: &FieldSamples,
    variable: usize,
    direction: Direction,
    threshold: Threshold,
) -> Result<Vec<f64>, AnalysisError> {
    joint_probability(
        field,
        &[ProbabilityCondition {
            variable,
            direction,
            threshold,
        }],
    )
}

/// Per-box probability that ALL conditions hold simultaneously in one draw.
pub fn joint_probability(
    field: &FieldSamples,
    conditions: &[ProbabilityCondition],
) -> Result<Vec<f64>, AnalysisError> {
    if field.n_samples == 0 {
        return Err(AnalysisError::EmptyArchive);
    }
    let resolved: Vec<(usize, Direction, f64)> = conditions
        .iter()
        .map(|c| {
            field.check_variable(c.variable)?;
            Ok((
                c.variable,
                c.direction,
                resolve_threshold(field, c.variable, c.threshold),
            ))
        })
        .collect::<Result<_, AnalysisError>>()?;
    let mut out = Vec::with_capacity(field.n);
    for i in 0..field.n {
        let mut hits = 0usize;
        for s in 0..field.n_samples {
            if resolved
                .iter()
                .all(|&(j, dir, thr)| satisfies(field.value(s, i, j), dir, thr))
            {
                hits += 1;
            }
        }
        out.push(hits as f64 / field.n_samples as f64);
    }
    Ok(out)
}

/// Result of a conditional query at one box: the conditional probability
/// (None when the conditioning bin is empty) and the bin's sample count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConditionalCell {
    pub probability: Option<f64>,
    pub bin_count: usize,
}

/// Per-box probability that `target_var` falls in its `target_quartile`
/// given that `cond_var` falls in `cond_quartile`. Quartile bins are 1
/// (lowest quarter) through 4 (highest); cut points come from each box's
/// own samples or from the pooled samples, per `scope`.
pub fn conditional_quartile_probability(
    field: &FieldSamples,
    cond_var: usize,
    cond_quartile: u8,
    target_var: usize,
    target_quartile: u8,
    scope: QuartileScope,
) -> Result<Vec<ConditionalCell>, AnalysisError> {
    if field.n_samples == 0 {
        return Err(AnalysisError::EmptyArchive);
    }
    field.check_variable(cond_var)?;
    field.check_variable(target_var)?;
    for q in [cond_quartile, target_quartile] {
        if !(1..=4).contains(&q) {
            return Err(AnalysisError::BadQuartile { q });
        }
    }
    let global_cuts = match scope {
        QuartileScope::Global => Some((
            quartile_cuts(field.pooled_variable(cond_var)),
            quartile_cuts(field.pooled_variable(target_var)),
        )),
        QuartileScope::PerBox => None,
    };
    let mut out = Vec::with_capacity(field.n);
    for i in 0..field.n {
        let (cond_cuts, target_cuts) = match global_cuts {
            Some(cuts) => cuts,
            None => (
                quartile_cuts(field.series(i, cond_var)),
                quartile_cuts(field.series(i, target_var)),
            ),
        };
        let mut bin = 0usize;
        let mut hits = 0usize;
        for s in 0..field.n_samples {
            if quartile_bin(field.value(s, i, cond_var), cond_cuts) == cond_quartile {
                bin += 1;
                if quartile_bin(field.value(s, i, target_var), target_cuts) == target_quartile {
                    hits += 1;
                }
            }
        }
        out.push(ConditionalCell {
            probability: (bin > 0).then(|| hits as f64 / bin as f64),
            bin_count: bin,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Grid-box posteriors
// ---------------------------------------------------------------------------

/// A grid box condensed to a p-variate Gaussian over the mean-change field:
/// sample mean and sample covariance across the archive draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridBoxPosterior {
    pub location: usize,
    pub mean: Vec<f64>,
    /// Row-major p×p sample covariance (denominator n−1).
    pub cov: Vec<f64>,
}

impl GridBoxPosterior {
    /// True when the covariance admits a Cholesky factorization.
    pub fn is_nondegenerate(&self) -> bool {
        DenseChol::new(&self.cov, self.mean.len()).is_ok()
    }
}

/// Sample mean and covariance of the p-variate field at every box.
pub fn fit_gridbox_posteriors(field: &FieldSamples) -> Result<Vec<GridBoxPosterior>, AnalysisError> {
    let s_n = field.n_samples;
    if s_n < 2 {
        return Err(AnalysisError::TooFewSamples { need: 2, got: s_n });
    }
    let p = field.p;
    let mut out = Vec::with_capacity(field.n);
    for i in 0..field.n {
        let mut mean = vec![0.0; p];
        for s in 0..s_n {
            for (j, m) in mean.iter_mut().enumerate() {
                *m += field.value(s, i, j);
            }
        }
        for m in mean.iter_mut() {
            *m /= s_n as f64;
        }
        let mut cov = vec![0.0; p * p];
        for s in 0..s_n {
            for a in 0..p {
                let da = field.value(s, i, a) - mean[a];
                for b in 0..p {
                    cov[a * p + b] += da * (field.value(s, i, b) - mean[b]);
                }
            }
        }
        for c in cov.iter_mut() {
            *c /= (s_n - 1) as f64;
        }
        out.push(GridBoxPosterior {
            location: i,
            mean,
            cov,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Symmetrized Kullback–Leibler divergence
// ---------------------------------------------------------------------------

/// Jeffreys divergence between two Gaussians: the SUM of the two directed
/// KL divergences. The log-determinant terms cancel, leaving
/// ½·[tr(Σ₂⁻¹Σ₁) + tr(Σ₁⁻¹Σ₂)] − d + ½·Δμ′(Σ₁⁻¹ + Σ₂⁻¹)Δμ.
pub fn symmetrized_kl(
    mean_a: &[f64],
    cov_a: &[f64],
    mean_b: &[f64],
    cov_b: &[f64],
) -> Result<f64, AnalysisError> {
    let d = mean_a.len();
    if mean_b.len() != d || cov_a.len() != d * d || cov_b.len() != d * d {
        return Err(AnalysisError::DimensionMismatch {
            what: "Gaussian mean/covariance shapes disagree".into(),
        });
    }
    let chol_a = DenseChol::new(cov_a, d)?;
    let chol_b = DenseChol::new(cov_b, d)?;
    let mut cross = 0.0;
    let mut col = vec![0.0; d];
    for c in 0..d {
        for r in 0..d {
            col[r] = cov_a[r * d + c];
        }
        cross += chol_b.solve(&col)?[c];
        for r in 0..d {
            col[r] = cov_b[r * d + c];
        }
        cross += chol_a.solve(&col)?[c];
    }
    let diff: Vec<f64> = mean_a.iter().zip(mean_b).map(|(a, b)| a - b).collect();
    let quad = chol_a.inv_quad_form(&diff)? + chol_b.inv_quad_form(&diff)?;
    Ok(0.5 * cross - d as f64 + 0.5 * quad)
}

// ---------------------------------------------------------------------------
// Hierarchical clustering
// ---------------------------------------------------------------------------

/// One agglomeration: clusters `a` and `b` (leaves are 0..n−1; merge `t`
/// creates cluster `n + t`) joined at `distance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

/// Full agglomeration sequence over `n_leaves` grid boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTree {
    pub n_leaves: usize,
    pub merges: Vec<Merge>,
}

impl ClusterTree {
    /// Labels after cutting the tree at `k` clusters. Each leaf's label is
    /// the smallest leaf index in its cluster, making labels canonical.
    pub fn labels_at(&self, k: usize) -> Result<Vec<usize>, AnalysisError> {
        let n = self.n_leaves;
        if k == 0 || k > n {
            return Err(AnalysisError::BadClusterCount { k, n });
        }
        // Union-find over leaf and internal cluster ids.
        let mut parent: Vec<usize> = (0..n + self.merges.len()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (t, m) in self.merges.iter().take(n - k).enumerate() {
            let ra = find(&mut parent, m.a);
            let rb = find(&mut parent, m.b);
            let new = n + t;
            parent[ra] = new;
            parent[rb] = new;
        }
        let mut smallest: Vec<usize> = vec![usize::MAX; n + self.merges.len()];
        for leaf in 0..n {
            let root = find(&mut parent, leaf);
            smallest[root] = smallest[root].min(leaf);
        }
        let mut labels = Vec::with_capacity(n);
        for leaf in 0..n {
            let root = find(&mut parent, leaf);
            labels.push(smallest[root]);
        }
        Ok(labels)
    }
}

/// Agglomerative clustering of grid boxes under pairwise symmetrized-KL
/// distances with the chosen linkage (Lance–Williams updates), cut at `k`
/// clusters. Ties break toward the lexicographically smallest active pair.
pub fn hierarchical_cluster(
    posteriors: &[GridBoxPosterior],
    linkage: Linkage,
    k: usize,
) -> Result<(Vec<usize>, ClusterTree), AnalysisError> {
    let n = posteriors.len();
    if k == 0 || k > n {
        return Err(AnalysisError::BadClusterCount { k, n });
    }
    for post in posteriors {
        if !post.is_nondegenerate() {
            return Err(AnalysisError::DegenerateBox {
                location: post.location,
            });
        }
    }
    // Dense symmetric distance matrix over active clusters.
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = symmetrized_kl(
                &posteriors[i].mean,
                &posteriors[i].cov,
                &posteriors[j].mean,
                &posteriors[j].cov,
            )?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    // active[slot] = Some((cluster id, member count)); merged slots carry
    // the merged cluster's distances in-place.
    let mut active: Vec<Option<(usize, usize)>> = (0..n).map(|i| Some((i, 1))).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for step in 0..n.saturating_sub(1) {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if active[i].is_none() {
                continue;
            }
            for j in (i + 1)..n {
                if active[j].is_none() {
                    continue;
                }
                let d = dist[i * n + j];
                if best.map(|(bd, _, _)| d < bd).unwrap_or(true) {
                    best = Some((d, i, j));
                }
            }
        }
        let (d, i, j) = best.expect("at least two active clusters");
        let (id_i, size_i) = active[i].unwrap();
        let (id_j, size_j) = active[j].unwrap();
        // Lance–Williams update of slot i's distances to every survivor.
        for w in 0..n {
            if w == i || w == j || active[w].is_none() {
                continue;
            }
            let diw = dist[i * n + w];
            let djw = dist[j * n + w];
            let updated = match linkage {
                Linkage::Average => {
                    (size_i as f64 * diw + size_j as f64 * djw) / (size_i + size_j) as f64
                }
                Linkage::Complete => diw.max(djw),
            };
            dist[i * n + w] = updated;
            dist[w * n + i] = updated;
        }
        active[i] = Some((n + step, size_i + size_j));
        active[j] = None;
        merges.push(Merge {
            a: id_i.min(id_j),
            b: id_i.max(id_j),
            distance: d,
        });
    }
    let tree = ClusterTree {
        n_leaves: n,
        merges,
    };
    let labels = tree.labels_at(k)?;
    Ok((labels, tree))
}

// ---------------------------------------------------------------------------
// Contour ellipses
// ---------------------------------------------------------------------------

/// Chi-square(2) quantile at probability `level`: −2·ln(1 − level).
pub fn chi2_2df_quantile(level: f64) -> f64 {
    -2.0 * (1.0 - level).ln()
}

/// The `level`-probability contour of a bivariate Gaussian grid-box
/// posterior, discretized to `resolution` points: the closed curve
/// {x : (x−μ)′Σ⁻¹(x−μ) = q} with q the chi-square(2) quantile.
pub fn contour_ellipse(
    post: &GridBoxPosterior,
    level: f64,
    resolution: usize,
) -> Result<Vec<(f64, f64)>, AnalysisError> {
    let p = post.mean.len();
    if p != 2 {
        return Err(AnalysisError::NotBivariate { p });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(AnalysisError::BadLevel { level });
    }
    if resolution < 3 {
        return Err(AnalysisError::BadResolution { got: resolution });
    }
    let chol = DenseChol::new(&post.cov, 2)?;
    let l = chol.l();
    let r = chi2_2df_quantile(level).sqrt();
    let mut points = Vec::with_capacity(resolution);
    for t in 0..resolution {
        let theta = 2.0 * std::f64::consts::PI * t as f64 / resolution as f64;
        let (c, s) = (theta.cos(), theta.sin());
        let x = post.mean[0] + r * l[0] * c;
        let y = post.mean[1] + r * (l[2] * c + l[3] * s);
        points.push((x, y));
    }
    Ok(points)
}
