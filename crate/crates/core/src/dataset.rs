//! Ensemble dataset I/O: the delimited on-disk format, covariate
//! standardization, and synthetic ensembles with known ground truth.
//!
//! The on-disk format is a comma-delimited text file with a mandatory
//! header:
//!
//! ```text
//! location,grid_x,grid_y,latitude,longitude,elevation,run1_var1,…,run{m}_var{p}
//! ```
//!
//! Rows appear in location order (`location = row·nx + col` row-major);
//! response columns are member-major with 1-based numbering. Floats are
//! written in Rust's shortest round-trip form, so a write/read cycle
//! reproduces every `f64` bit for bit. Covariates are stored raw; loading
//! standardizes latitude, longitude, and elevation to mean zero and unit
//! sample variance to form the fixed-effect design `X1`, with a single
//! intercept column as the random-effect design `X2`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::write_atomic;
use crate::chol::{compute_ordering, numeric_factorize, symbolic_factorize, CholError};
use crate::config::{RunConfig, SimulateConfig};
use crate::lattice::{build_grid_lattice, AdjacencyOrder, GridLattice, LatticeError, StackedLattice};
use crate::model::{draw_observations, EnsembleDataset, ModelError, ModelState};
use crate::precision::{DependenceParams, PrecisionError, PrecisionPattern};

/// Number of fixed-effect covariates (latitude, longitude, elevation).
pub const FIXED_COVARIATES: usize = 3;

const FIXED_HEADER: [&str; 6] = [
    "location",
    "grid_x",
    "grid_y",
    "latitude",
    "longitude",
    "elevation",
];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("header: {0}")]
    Header(String),
    #[error("line {line}, field {field}: {what}")]
    Field {
        line: usize,
        field: String,
        what: String,
    },
    #[error("line {line}: {what}")]
    Line { line: usize, what: String },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lattice(#[from] LatticeError),
    #[error(transparent)]
    Precision(#[from] PrecisionError),
    #[error(transparent)]
    Factorization(#[from] CholError),
}

// ---------------------------------------------------------------------------
// The delimited table
// ---------------------------------------------------------------------------

/// In-memory image of one dataset file: raw covariates plus responses in
/// the model layout `y[(r·p + j)·n + i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleCsv {
    pub m: usize,
    pub p: usize,
    pub grid_x: Vec<usize>,
    pub grid_y: Vec<usize>,
    pub latitude: Vec<f64>,
    pub longitude: Vec<f64>,
    pub elevation: Vec<f64>,
    pub y: Vec<f64>,
}

fn response_column(r: usize, j: usize) -> String {
    format!("run{}_var{}", r + 1, j + 1)
}

impl EnsembleCsv {
    /// Number of grid locations (rows).
    pub fn n(&self) -> usize {
        self.grid_x.len()
    }

    /// Renders the table, floats in shortest round-trip form.
    pub fn to_csv_string(&self) -> String {
        let n = self.n();
        let mut s = String::new();
        s.push_str(&FIXED_HEADER.join(","));
        for r in 0..self.m {
            for j in 0..self.p {
                s.push(',');
                s.push_str(&response_column(r, j));
            }
        }
        s.push('\n');
        for i in 0..n {
            s.push_str(&format!(
                "{},{},{},{},{},{}",
                i, self.grid_x[i], self.grid_y[i], self.latitude[i], self.longitude[i],
                self.elevation[i]
            ));
            for col in 0..self.m * self.p {
                s.push(',');
                s.push_str(&format!("{}", self.y[col * n + i]));
            }
            s.push('\n');
        }
        s
    }

    /// Atomically writes the table to `path`.
    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        write_atomic(path, self.to_csv_string().as_bytes()).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let text = fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Parses the delimited text. Errors cite 1-based file lines and the
    /// offending field by column name.
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().map(|l| l.trim_end_matches('\r'));
        let header = lines
            .next()
            .ok_or_else(|| DatasetError::Header("file is empty".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < FIXED_HEADER.len() + 1 {
            return Err(DatasetError::Header(format!(
                "expected at least {} columns, got {}",
                FIXED_HEADER.len() + 1,
                cols.len()
            )));
        }
        for (k, want) in FIXED_HEADER.iter().enumerate() {
            if cols[k] != *want {
                return Err(DatasetError::Header(format!(
                    "column {} must be {want:?}, got {:?}",
                    k + 1,
                    cols[k]
                )));
            }
        }
        let pairs: Vec<(usize, usize)> = cols[FIXED_HEADER.len()..]
            .iter()
            .map(|c| {
                let rest = c
                    .strip_prefix("run")
                    .ok_or_else(|| DatasetError::Header(format!("bad response column {c:?}")))?;
                let (r, j) = rest
                    .split_once("_var")
                    .ok_or_else(|| DatasetError::Header(format!("bad response column {c:?}")))?;
                let parse = |s: &str| {
                    s.parse::<usize>().map_err(|_| {
                        DatasetError::Header(format!("bad response column {c:?}"))
                    })
                };
                Ok((parse(r)?, parse(j)?))
            })
            .collect::<Result<_, DatasetError>>()?;
        let p = pairs.iter().take_while(|&&(r, _)| r == 1).count();
        if p == 0 || pairs.len() % p != 0 {
            return Err(DatasetError::Header(
                "response columns are not a complete run-major grid".into(),
            ));
        }
        let m = pairs.len() / p;
        for (k, &(r, j)) in pairs.iter().enumerate() {
            let want = (k / p + 1, k % p + 1);
            if (r, j) != want {
                return Err(DatasetError::Header(format!(
                    "response column {} must be {:?}, got {:?}",
                    k + FIXED_HEADER.len() + 1,
                    response_column(want.0 - 1, want.1 - 1),
                    response_column(r.wrapping_sub(1), j.wrapping_sub(1)),
                )));
            }
        }

        let data_lines: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        let n = data_lines.len();
        if n == 0 {
            return Err(DatasetError::Shape("no data rows".into()));
        }
        let mut out = EnsembleCsv {
            m,
            p,
            grid_x: Vec::with_capacity(n),
            grid_y: Vec::with_capacity(n),
            latitude: Vec::with_capacity(n),
            longitude: Vec::with_capacity(n),
            elevation: Vec::with_capacity(n),
            y: vec![0.0; m * p * n],
        };
        for (i, raw) in data_lines.iter().enumerate() {
            let line = i + 2; // 1-based file line, after the header
            let fields: Vec<&str> = raw.split(',').collect();
            if fields.len() != FIXED_HEADER.len() + m * p {
                return Err(DatasetError::Line {
                    line,
                    what: format!(
                        "expected {} fields, got {}",
                        FIXED_HEADER.len() + m * p,
                        fields.len()
                    ),
                });
            }
            let uint = |k: usize| -> Result<usize, DatasetError> {
                fields[k].parse().map_err(|_| DatasetError::Field {
                    line,
                    field: FIXED_HEADER[k].into(),
                    what: format!("cannot parse {:?} as an integer", fields[k]),
                })
            };
            let float = |k: usize, name: String| -> Result<f64, DatasetError> {
                let v: f64 = fields[k].parse().map_err(|_| DatasetError::Field {
                    line,
                    field: name.clone(),
                    what: format!("cannot parse {:?} as a number", fields[k]),
                })?;
                if !v.is_finite() {
                    return Err(DatasetError::Field {
                        line,
                        field: name,
                        what: format!("value {v} is not finite"),
                    });
                }
                Ok(v)
            };
            let location = uint(0)?;
            if location != i {
                return Err(DatasetError::Line {
                    line,
                    what: format!("location must be {i} (rows are in location order), got {location}"),
                });
            }
            out.grid_x.push(uint(1)?);
            out.grid_y.push(uint(2)?);
            out.latitude.push(float(3, FIXED_HEADER[3].into())?);
            out.longitude.push(float(4, FIXED_HEADER[4].into())?);
            out.elevation.push(float(5, FIXED_HEADER[5].into())?);
            for col in 0..m * p {
                let name = response_column(col / p, col % p);
                out.y[col * n + i] = float(FIXED_HEADER.len() + col, name)?;
            }
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Standardizes one covariate column to mean zero, unit sample variance.
fn standardize(name: &str, values: &[f64]) -> Result<Vec<f64>, DatasetError> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(DatasetError::Shape(format!(
            "covariate {name} has zero variance and cannot be standardized"
        )));
    }
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Converts a parsed table into a model-ready dataset on an `nx × ny`
/// lattice: validates the grid coordinates, standardizes the covariates
/// into `X1`, and installs the intercept-only `X2`.
pub fn dataset_from_csv(
    csv: &EnsembleCsv,
    nx: usize,
    ny: usize,
    order: AdjacencyOrder,
) -> Result<EnsembleDataset, DatasetError> {
    let n = csv.n();
    if n != nx * ny {
        return Err(DatasetError::Shape(format!(
            "table has {n} locations but the {nx}x{ny} lattice needs {}",
            nx * ny
        )));
    }
    for i in 0..n {
        let (want_x, want_y) = (i % nx, i / nx);
        if csv.grid_x[i] != want_x || csv.grid_y[i] != want_y {
            return Err(DatasetError::Line {
                line: i + 2,
                what: format!(
                    "grid coordinates ({}, {}) do not match row-major location {i} = ({want_x}, {want_y})",
                    csv.grid_x[i], csv.grid_y[i]
                ),
            });
        }
    }
    let lat = standardize("latitude", &csv.latitude)?;
    let lon = standardize("longitude", &csv.longitude)?;
    let elev = standardize("elevation", &csv.elevation)?;
    let mut x1 = Vec::with_capacity(n * FIXED_COVARIATES);
    for i in 0..n {
        x1.extend_from_slice(&[lat[i], lon[i], elev[i]]);
    }
    let grid = build_grid_lattice(nx, ny, order)?;
    let lattice = StackedLattice::new(grid, csv.p)?;
    Ok(EnsembleDataset::new(
        lattice,
        csv.m,
        csv.y.clone(),
        x1,
        FIXED_COVARIATES,
        vec![1.0; n],
        1,
    )?)
}

/// Reads the dataset a run config points at and checks it against the
/// config's lattice and variable list.
pub fn load_ensemble(path: &Path, cfg: &RunConfig) -> Result<EnsembleDataset, DatasetError> {
    let csv = EnsembleCsv::read(path)?;
    if csv.p != cfg.p() {
        return Err(DatasetError::Shape(format!(
            "dataset has {} variables per member but the config lists {}",
            csv.p,
            cfg.p()
        )));
    }
    dataset_from_csv(&csv, cfg.lattice.nx, cfg.lattice.ny, cfg.lattice.order)
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

/// Ground-truth parameters of a synthetic ensemble. Layouts match
/// [`crate::model::ModelState`]: `alpha[j·3 + c]`, `beta_bar[j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationTruth {
    pub alpha: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub sigma2_b: f64,
    pub sigma2_h: f64,
    pub dep: DependenceParams,
}

impl SimulationTruth {
    pub fn p(&self) -> usize {
        self.sigma2.len()
    }

    /// Flattens the row-per-variable `[simulate]` config section.
    pub fn from_config(sim: &SimulateConfig) -> Result<Self, DatasetError> {
        let p = sim.sigma2.len();
        let dep = DependenceParams::new(
            p,
            sim.rho.clone(),
            sim.phi.concat(),
            sim.tau2.clone(),
        )?;
        let truth = SimulationTruth {
            alpha: sim.alpha.concat(),
            beta_bar: sim.beta_bar.concat(),
            sigma2: sim.sigma2.clone(),
            sigma2_b: sim.sigma2_b,
            sigma2_h: sim.sigma2_h,
            dep,
        };
        truth.validate()?;
        Ok(truth)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let p = self.p();
        if p == 0 {
            return Err(DatasetError::Shape("truth lists no variables".into()));
        }
        if self.dep.p() != p {
            return Err(DatasetError::Shape(format!(
                "dependence parameters are for p = {}, truth has p = {p}",
                self.dep.p()
            )));
        }
        if self.alpha.len() != p * FIXED_COVARIATES || self.beta_bar.len() != p {
            return Err(DatasetError::Shape(
                "alpha/beta_bar lengths do not match the variable count".into(),
            ));
        }
        // Zero variances are allowed: they give exact noiseless limits.
        for (what, ok) in [
            ("sigma2", self.sigma2.iter().all(|&v| v >= 0.0 && v.is_finite())),
            ("sigma2_b", self.sigma2_b >= 0.0 && self.sigma2_b.is_finite()),
            ("sigma2_h", self.sigma2_h >= 0.0 && self.sigma2_h.is_finite()),
        ] {
            if !ok {
                return Err(DatasetError::Shape(format!(
                    "{what} must be non-negative and finite"
                )));
            }
        }
        Ok(())
    }
}

/// A generated ensemble: the writable table, the truth that produced it,
/// and the drawn latent state (β_r, h̄, h_r) for moment checks.
#[derive(Debug, Clone)]
pub struct SimulatedEnsemble {
    pub csv: EnsembleCsv,
    pub truth: SimulationTruth,
    pub seed: u64,
    pub state: ModelState,
}

/// Deterministic raw covariates: latitude rises northward, longitude
/// eastward, and elevation follows a smooth ridge-and-valley surface.
pub fn synthetic_covariates(grid: &GridLattice) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = grid.n();
    let (nx, ny) = (grid.nx() as f64, grid.ny() as f64);
    let mut lat = Vec::with_capacity(n);
    let mut lon = Vec::with_capacity(n);
    let mut elev = Vec::with_capacity(n);
    for i in 0..n {
        let (gx, gy) = grid.grid_coords(i);
        let (x, y) = (gx as f64, gy as f64);
        lat.push(25.0 + 0.5 * y);
        lon.push(-125.0 + 0.5 * x);
        elev.push(
            750.0
                + 600.0 * (2.0 * std::f64::consts::PI * x / nx).sin()
                    * (std::f64::consts::PI * y / ny).cos()
                + 15.0 * (x + y),
        );
    }
    (lat, lon, elev)
}

/// Draws a synthetic `m`-member ensemble from the hierarchical model with
/// the given truth: h̄ ~ N(0, σ_h²·I), β_r ~ N(β̄, σ_b²·I),
/// h_r ~ N(h̄, Q(θ)⁻¹), y = X1·α + X2·β_r + h_r + N(0, σ_j²). The design
/// matrices are the standardized synthetic covariates, exactly as a
/// fitting run will reconstruct them from the written table.
pub fn simulate_dataset(
    truth: &SimulationTruth,
    grid: &GridLattice,
    m: usize,
    seed: u64,
) -> Result<SimulatedEnsemble, DatasetError> {
    truth.validate()?;
    if m < 2 {
        return Err(DatasetError::Shape(format!(
            "simulation needs at least 2 members, got {m}"
        )));
    }
    if grid.nx() < 2 || grid.ny() < 2 {
        return Err(DatasetError::Shape(
            "simulation needs at least a 2x2 grid so every covariate varies".into(),
        ));
    }
    let p = truth.p();
    let n = grid.n();
    let lattice = StackedLattice::new(grid.clone(), p)?;
    let dim = lattice.dim();

    let (lat, lon, elev) = synthetic_covariates(grid);
    let csv_skeleton = EnsembleCsv {
        m,
        p,
        grid_x: (0..n).map(|i| grid.grid_coords(i).0).collect(),
        grid_y: (0..n).map(|i| grid.grid_coords(i).1).collect(),
        latitude: lat,
        longitude: lon,
        elevation: elev,
        y: vec![0.0; m * p * n],
    };
    let mut data = dataset_from_csv(&csv_skeleton, grid.nx(), grid.ny(), grid.order())?;

    let pattern = PrecisionPattern::new(&lattice);
    let q = pattern.assemble(&truth.dep)?;
    let symbolic = symbolic_factorize(pattern.pattern(), compute_ordering(pattern.pattern()));
    let factor = numeric_factorize(&symbolic, &q)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::init(&data, truth.dep.clone());
    state.alpha = truth.alpha.clone();
    state.beta_bar = truth.beta_bar.clone();
    state.sigma2 = truth.sigma2.clone();
    state.sigma2_b = truth.sigma2_b;
    let sd_h = truth.sigma2_h.sqrt();
    state.h_bar = (0..dim)
        .map(|_| sd_h * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let sd_b = truth.sigma2_b.sqrt();
    for r in 0..m {
        for j in 0..p {
            state.beta_r[r * p + j] =
                truth.beta_bar[j] + sd_b * rng.sample::<f64, _>(StandardNormal);
        }
    }
    for r in 0..m {
        let h = factor.sample_gmrf(&state.h_bar, &mut rng);
        state.h_r[r * dim..(r + 1) * dim].copy_from_slice(&h);
    }
    let y = draw_observations(&data, &state, &mut rng);
    data.set_y(y.clone())?;

    let mut csv = csv_skeleton;
    csv.y = y;
    Ok(SimulatedEnsemble {
        csv,
        truth: truth.clone(),
        seed,
        state,
    })
}

/// JSON sidecar recording what generated a synthetic dataset.
pub fn truth_sidecar_json(sim: &SimulatedEnsemble, grid: &GridLattice) -> String {
    #[derive(Serialize)]
    struct Sidecar<'a> {
        seed: u64,
        m: usize,
        nx: usize,
        ny: usize,
        truth: &'a SimulationTruth,
    }
    serde_json::to_string_pretty(&Sidecar {
        seed: sim.seed,
        m: sim.csv.m,
        nx: grid.nx(),
        ny: grid.ny(),
        truth: &sim.truth,
    })
    .expect("sidecar serializes")
}
