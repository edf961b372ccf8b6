//! Run configuration: the TOML schema tying a lattice, a dataset, priors,
//! sampler settings, and analysis requests together, plus validation and a
//! canonical hash.
//!
//! Deserialization expands every omitted field to its documented default,
//! so a parsed [`RunConfig`] *is* the effective configuration. The
//! [`RunConfig::config_hash`] is a SHA-256 over the canonical JSON
//! serialization of that effective configuration; archives stamp it into
//! their header so a run can always be matched to the exact settings that
//! produced it, regardless of which defaults the author spelled out.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{Direction, Linkage, NamedThreshold, QuartileScope, Threshold};
use crate::lattice::AdjacencyOrder;
use crate::model::PriorSpec;
use crate::sampler::SamplerConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

// ---------------------------------------------------------------------------
// Sections
// ---------------------------------------------------------------------------

/// `[lattice]`: grid extent and adjacency order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeConfig {
    pub nx: usize,
    pub ny: usize,
    #[serde(default)]
    pub order: AdjacencyOrder,
}

/// One `[[variables]]` entry: a modeled variable and its display unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableConfig {
    pub name: String,
    #[serde(default)]
    pub unit: String,
}

/// `[data]`: where the ensemble CSV lives. Relative paths resolve against
/// the config file's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
}

/// `[output]`: directory receiving archives and summary tables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

/// A variable reference in an analysis request: positional index or name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VarRef {
    Index(usize),
    Name(String),
}

impl VarRef {
    /// Resolves to a variable index against the `[[variables]]` list.
    pub fn resolve(&self, variables: &[VariableConfig]) -> Result<usize, ConfigError> {
        match self {
            VarRef::Index(i) => {
                if *i < variables.len() {
                    Ok(*i)
                } else {
                    Err(invalid(format!(
                        "variable index {i} out of range (have {})",
                        variables.len()
                    )))
                }
            }
            VarRef::Name(name) => variables
                .iter()
                .position(|v| v.name == *name)
                .ok_or_else(|| invalid(format!("unknown variable name {name:?}"))),
        }
    }
}

fn default_threshold() -> Threshold {
    Threshold::Named(NamedThreshold::GlobalMedian)
}

/// One `[[analysis.probability]]` request or one member of a joint request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbabilityRequest {
    pub variable: VarRef,
    pub direction: Direction,
    #[serde(default = "default_threshold")]
    pub threshold: Threshold,
}

/// One `[[analysis.joint]]` request: all conditions must hold at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointRequest {
    pub conditions: Vec<ProbabilityRequest>,
}

/// One `[[analysis.conditional]]` request: P(target in its quartile |
/// condition variable in its quartile), quartiles numbered 1 (lowest) to 4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionalRequest {
    pub condition_variable: VarRef,
    pub condition_quartile: u8,
    pub target_variable: VarRef,
    pub target_quartile: u8,
    #[serde(default = "default_scope")]
    pub scope: QuartileScope,
}

fn default_scope() -> QuartileScope {
    QuartileScope::PerBox
}

/// `[analysis.cluster]`: cut the symmetrized-KL dendrogram at `k` clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterRequest {
    pub k: usize,
    #[serde(default = "default_linkage")]
    pub linkage: Linkage,
}

fn default_linkage() -> Linkage {
    Linkage::Average
}

/// `[analysis.contour]`: posterior ellipses at the listed grid boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContourRequest {
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    pub boxes: Vec<usize>,
}

fn default_level() -> f64 {
    0.95
}

fn default_resolution() -> usize {
    64
}

/// `[analysis]`: the summaries a `summarize` run should produce.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub probability: Vec<ProbabilityRequest>,
    pub joint: Vec<JointRequest>,
    pub conditional: Vec<ConditionalRequest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster: Option<ClusterRequest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub contour: Option<ContourRequest>,
}

/// `[simulate]`: ground-truth parameters for synthetic-data generation.
/// Row layouts: one row per variable (`alpha` rows of length 3 for the
/// latitude/longitude/elevation covariates, `beta_bar` rows of length 1
/// for the intercept, `phi` rows of length p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub m: usize,
    pub alpha: Vec<Vec<f64>>,
    pub beta_bar: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub sigma2_b: f64,
    pub sigma2_h: f64,
    pub rho: Vec<f64>,
    pub phi: Vec<Vec<f64>>,
    pub tau2: Vec<f64>,
}

// ---------------------------------------------------------------------------
// The top-level config
// ---------------------------------------------------------------------------

/// A full run configuration, as parsed from TOML with defaults expanded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub lattice: LatticeConfig,
    pub variables: Vec<VariableConfig>,
    pub data: DataConfig,
    pub output: OutputConfig,
    #[serde(default)]
    pub priors: PriorSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
}

impl RunConfig {
    /// Parses TOML text; every omitted optional field takes its default.
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Number of modeled variables.
    pub fn p(&self) -> usize {
        self.variables.len()
    }

    pub fn variable_names(&self) -> Vec<String> {
        self.variables.iter().map(|v| v.name.clone()).collect()
    }

    /// Resolves a possibly-relative path against the config file's
    /// directory.
    pub fn resolve_path(base: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            base.join(path)
        }
    }

    /// Semantic validation of the effective configuration. File existence
    /// is checked separately (see [`RunConfig::validate_data_path`]).
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lattice.nx == 0 || self.lattice.ny == 0 {
            return Err(invalid(format!(
                "lattice must be non-empty, got {}x{}",
                self.lattice.nx, self.lattice.ny
            )));
        }
        if self.variables.is_empty() {
            return Err(invalid("at least one [[variables]] entry is required"));
        }
        for (j, v) in self.variables.iter().enumerate() {
            if v.name.is_empty() {
                return Err(invalid(format!("variable {j} has an empty name")));
            }
            if self.variables[..j].iter().any(|w| w.name == v.name) {
                return Err(invalid(format!("duplicate variable name {:?}", v.name)));
            }
        }
        self.priors
            .validate()
            .map_err(|e| invalid(format!("[priors]: {e}")))?;
        self.sampler
            .validate()
            .map_err(|e| invalid(format!("[sampler]: {e}")))?;
        self.validate_analysis()?;
        if let Some(sim) = &self.simulate {
            self.validate_simulate(sim)?;
        }
        Ok(())
    }

    /// Checks that the dataset path (resolved against `base`) exists.
    pub fn validate_data_path(&self, base: &Path) -> Result<(), ConfigError> {
        let path = Self::resolve_path(base, &self.data.path);
        if !path.is_file() {
            return Err(invalid(format!(
                "dataset {} does not exist or is not a file",
                path.display()
            )));
        }
        Ok(())
    }

    fn validate_analysis(&self) -> Result<(), ConfigError> {
        let n_boxes = self.lattice.nx * self.lattice.ny;
        for req in &self.analysis.probability {
            req.variable.resolve(&self.variables)?;
        }
        for (i, joint) in self.analysis.joint.iter().enumerate() {
            if joint.conditions.is_empty() {
                return Err(invalid(format!(
                    "[[analysis.joint]] entry {i} has no conditions"
                )));
            }
            for c in &joint.conditions {
                c.variable.resolve(&self.variables)?;
            }
        }
        for req in &self.analysis.conditional {
            req.condition_variable.resolve(&self.variables)?;
            req.target_variable.resolve(&self.variables)?;
            for q in [req.condition_quartile, req.target_quartile] {
                if !(1..=4).contains(&q) {
                    return Err(invalid(format!("quartile {q} out of range 1..=4")));
                }
            }
        }
        if let Some(cl) = &self.analysis.cluster {
            if cl.k == 0 || cl.k > n_boxes {
                return Err(invalid(format!(
                    "cluster count {} out of range 1..={n_boxes}",
                    cl.k
                )));
            }
        }
        if let Some(ct) = &self.analysis.contour {
            if self.variables.len() != 2 {
                return Err(invalid(format!(
                    "contour ellipses need exactly two variables, config lists {}",
                    self.variables.len()
                )));
            }
            if !(ct.level > 0.0 && ct.level < 1.0) {
                return Err(invalid(format!(
                    "contour level must be in (0, 1), got {}",
                    ct.level
                )));
            }
            if ct.resolution < 3 {
                return Err(invalid(format!(
                    "contour resolution must be at least 3, got {}",
                    ct.resolution
                )));
            }
            if ct.boxes.is_empty() {
                return Err(invalid("contour request lists no grid boxes"));
            }
            for &b in &ct.boxes {
                if b >= n_boxes {
                    return Err(invalid(format!(
                        "contour box {b} out of range 0..{n_boxes}"
                    )));
                }
            }
        }
        Ok(())
    }

    fn validate_simulate(&self, sim: &SimulateConfig) -> Result<(), ConfigError> {
        let p = self.p();
        if sim.m < 2 {
            return Err(invalid("[simulate] needs at least 2 ensemble members"));
        }
        let rows = |what: &str, m: &Vec<Vec<f64>>, cols: usize| -> Result<(), ConfigError> {
            if m.len() != p || m.iter().any(|r| r.len() != cols) {
                return Err(invalid(format!(
                    "[simulate] {what} must be {p} rows of {cols} values"
                )));
            }
            Ok(())
        };
        rows("alpha", &sim.alpha, crate::dataset::FIXED_COVARIATES)?;
        rows("beta_bar", &sim.beta_bar, 1)?;
        rows("phi", &sim.phi, p)?;
        for (what, v) in [("sigma2", &sim.sigma2), ("tau2", &sim.tau2)] {
            if v.len() != p {
                return Err(invalid(format!(
                    "[simulate] {what} must list {p} values"
                )));
            }
        }
        if sim.tau2.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(invalid("[simulate] tau2 must be positive"));
        }
        // Zero noise variances are allowed (exact noiseless limits).
        if sim.sigma2.iter().any(|&x| !(x >= 0.0 && x.is_finite()))
            || !(sim.sigma2_b >= 0.0 && sim.sigma2_b.is_finite())
            || !(sim.sigma2_h >= 0.0 && sim.sigma2_h.is_finite())
        {
            return Err(invalid(
                "[simulate] variances must be non-negative and finite",
            ));
        }
        if sim.rho.len() != p * (p - 1) / 2 {
            return Err(invalid(format!(
                "[simulate] rho must list {} values",
                p * (p - 1) / 2
            )));
        }
        Ok(())
    }

    /// SHA-256 (hex) of the canonical JSON form of the effective config.
    /// Two configs that differ only in which defaults they spell out hash
    /// identically.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let digest = h.finalize();
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// The effective configuration rendered back to TOML.
    pub fn effective_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
