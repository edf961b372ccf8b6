//! Command-line surface: `validate`, `simulate`, `sample`, `diagnose`,
//! and `summarize` over one TOML run configuration.
//!
//! [`cli_main`] is an in-process entry point returning the exit status,
//! so the whole pipeline is testable without spawning a binary. Exit
//! codes: 0 success, 2 configuration error, 3 data error, 4 convergence
//! warning (outputs are still written), 5 internal error. Logging goes to
//! stderr; summaries and tables go to stdout or to delimited text files
//! in the configured output directory, written atomically.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use log::{warn, LevelFilter};

use crate::analysis::{
    conditional_quartile_probability, contour_ellipse, fit_gridbox_posteriors,
    hierarchical_cluster, pointwise_probability, joint_probability, AnalysisError, Direction,
    FieldSamples, GridBoxPosterior, Linkage, NamedThreshold, ProbabilityCondition, Threshold,
};
use crate::archive::{write_atomic, ArchiveError, PosteriorArchive};
use crate::config::{
    ClusterRequest, ConfigError, ContourRequest, ProbabilityRequest, RunConfig, VarRef,
};
use crate::dataset::{load_ensemble, simulate_dataset, truth_sidecar_json, DatasetError,
    SimulationTruth};
use crate::lattice::build_grid_lattice;
use crate::sampler::{run_ensemble_analysis, SamplerError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_CONVERGENCE: i32 = 4;
pub const EXIT_INTERNAL: i32 = 5;

/// Default archive file name inside the output directory.
pub const DEFAULT_ARCHIVE: &str = "posterior.mvmf";

// ---------------------------------------------------------------------------
// Errors and logging
// ---------------------------------------------------------------------------

#[derive(Debug)]
enum CliError {
    Config(String),
    Data(String),
    Internal(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) | CliError::Data(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(_) | SamplerError::Startup(_) => CliError::Config(e.to_string()),
            _ => CliError::Internal(e.to_string()),
        }
    }
}

fn read_archive(path: &Path) -> Result<PosteriorArchive, CliError> {
    PosteriorArchive::read(path).map_err(|e| match e {
        ArchiveError::Io(_) => CliError::Data(format!("cannot read {}: {e}", path.display())),
        other => CliError::Data(format!("{}: {other}", path.display())),
    })
}

struct StderrLogger;

static LOGGER: StderrLogger = StderrLogger;

impl log::Log for StderrLogger {
    fn enabled(&self, _metadata: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        eprintln!("[{}] {}", record.level().as_str().to_lowercase(), record.args());
    }

    fn flush(&self) {}
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        _ => LevelFilter::Debug,
    };
    let _ = log::set_logger(&LOGGER);
    log::set_max_level(level);
}

// ---------------------------------------------------------------------------
// Argument grammar
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "mvmrf",
    version,
    about = "Hierarchical multivariate Markov random field analysis of gridded ensembles"
)]
struct Cli {
    /// Run configuration (TOML). Required by every subcommand.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override the sampler seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the number of chains from the config.
    #[arg(long, global = true)]
    chains: Option<usize>,

    /// Override the output directory from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse the config, check the dataset, and print a dimension summary.
    Validate,
    /// Generate a synthetic ensemble (and truth sidecar) at the config's
    /// dataset path, from the [simulate] section.
    Simulate,
    /// Run the three-regime sampler and write the posterior archive.
    Sample,
    /// Print convergence diagnostics and acceptance rates for an archive.
    Diagnose {
        /// Archive to inspect (default: <output dir>/posterior.mvmf).
        #[arg(long, value_name = "PATH")]
        archive: Option<PathBuf>,
    },
    /// Write probability maps, cluster labels, and contour ellipses.
    Summarize {
        /// Archive to summarize (default: <output dir>/posterior.mvmf).
        #[arg(long, value_name = "PATH")]
        archive: Option<PathBuf>,
        /// Extra pointwise map for every variable, DIRECTION:THRESHOLD
        /// (e.g. above:median, below:-0.25). Repeatable.
        #[arg(long = "prob", value_name = "SPEC")]
        prob: Vec<String>,
        /// Cluster the grid boxes into K groups (overrides the config).
        #[arg(long, value_name = "K")]
        cluster_k: Option<usize>,
        /// Clustering linkage: average or complete.
        #[arg(long, value_name = "RULE")]
        linkage: Option<String>,
        /// Contour ellipses at these grid boxes (repeatable; overrides the
        /// config's box list).
        #[arg(long = "contour-box", value_name = "BOX")]
        contour_boxes: Vec<usize>,
        /// Contour probability level in (0, 1).
        #[arg(long, value_name = "LEVEL")]
        contour_level: Option<f64>,
        /// Points per contour ellipse.
        #[arg(long, value_name = "N")]
        contour_resolution: Option<usize>,
    },
}

// ---------------------------------------------------------------------------
// Entry points
// ---------------------------------------------------------------------------

/// Parses `argv` (including the program name) and runs the subcommand,
/// writing tables to stdout. Returns the process exit status.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    cli_run(argv, &mut std::io::stdout())
}

/// [`cli_main`] with an explicit stdout sink, for in-process tests.
pub fn cli_run<I, T, W>(argv: I, out: &mut W) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
    W: std::io::Write,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    EXIT_OK
                }
                _ => EXIT_CONFIG,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match run(cli) {
        Ok((code, text)) => {
            if out.write_all(text.as_bytes()).is_err() {
                return EXIT_INTERNAL;
            }
            code
        }
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(i32, String), CliError> {
    let config_path = cli
        .config
        .clone()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = RunConfig::load(&config_path)?;
    let base = config_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    if let Some(seed) = cli.seed {
        cfg.sampler.seed = seed;
    }
    if let Some(chains) = cli.chains {
        cfg.sampler.n_chains = chains;
    }
    if let Some(out_dir) = &cli.out {
        cfg.output.dir = out_dir.clone();
    }
    cfg.validate()?;
    let data_path = RunConfig::resolve_path(&base, &cfg.data.path);
    // A --out override is relative to the caller's working directory; a
    // config value is relative to the config file.
    let out_dir = if cli.out.is_some() {
        cfg.output.dir.clone()
    } else {
        RunConfig::resolve_path(&base, &cfg.output.dir)
    };

    match &cli.cmd {
        Command::Validate => cmd_validate(&cfg, &base, &data_path),
        Command::Simulate => cmd_simulate(&cfg, &data_path),
        Command::Sample => cmd_sample(&cfg, &data_path, &out_dir),
        Command::Diagnose { archive } => {
            let path = archive.clone().unwrap_or_else(|| out_dir.join(DEFAULT_ARCHIVE));
            cmd_diagnose(&path)
        }
        Command::Summarize {
            archive,
            prob,
            cluster_k,
            linkage,
            contour_boxes,
            contour_level,
            contour_resolution,
        } => {
            let path = archive.clone().unwrap_or_else(|| out_dir.join(DEFAULT_ARCHIVE));
            let flags = SummarizeFlags {
                prob,
                cluster_k: *cluster_k,
                linkage: linkage.as_deref(),
                contour_boxes,
                contour_level: *contour_level,
                contour_resolution: *contour_resolution,
            };
            cmd_summarize(&cfg, &data_path, &out_dir, &path, &flags)
        }
    }
}

// ---------------------------------------------------------------------------
// validate / simulate / sample
// ---------------------------------------------------------------------------

fn cmd_validate(cfg: &RunConfig, base: &Path, data_path: &Path) -> Result<(i32, String), CliError> {
    cfg.validate_data_path(base)?;
    let data = load_ensemble(data_path, cfg)?;
    let mut s = String::new();
    let _ = writeln!(s, "configuration OK");
    let _ = writeln!(
        s,
        "lattice: {}x{} ({} grid boxes), {:?} adjacency",
        cfg.lattice.nx,
        cfg.lattice.ny,
        data.n(),
        cfg.lattice.order
    );
    let _ = writeln!(
        s,
        "variables: {} ({})",
        data.p(),
        cfg.variable_names().join(", ")
    );
    let _ = writeln!(
        s,
        "ensemble: {} members, {} fixed covariates, {} random covariate(s)",
        data.m(),
        data.q1(),
        data.q2()
    );
    let _ = writeln!(
        s,
        "sampler: {} chains, regimes {}+{}+{}, thin {}, seed {}",
        cfg.sampler.n_chains,
        cfg.sampler.regime1_iters,
        cfg.sampler.regime2_iters,
        cfg.sampler.regime3_iters,
        cfg.sampler.thin,
        cfg.sampler.seed
    );
    let _ = writeln!(s, "config hash: {}", cfg.config_hash());
    Ok((EXIT_OK, s))
}

fn cmd_simulate(cfg: &RunConfig, data_path: &Path) -> Result<(i32, String), CliError> {
    let sim_cfg = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| CliError::Config("config has no [simulate] section".into()))?;
    let truth =
        SimulationTruth::from_config(sim_cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let grid = build_grid_lattice(cfg.lattice.nx, cfg.lattice.ny, cfg.lattice.order)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let sim = simulate_dataset(&truth, &grid, sim_cfg.m, cfg.sampler.seed).map_err(|e| match e {
        DatasetError::Io { .. } => CliError::Internal(e.to_string()),
        other => CliError::Config(other.to_string()),
    })?;
    if let Some(parent) = data_path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", parent.display())))?;
    }
    sim.csv
        .write(data_path)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", data_path.display())))?;
    let sidecar = data_path.with_extension("truth.json");
    write_atomic(&sidecar, truth_sidecar_json(&sim, &grid).as_bytes())
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", sidecar.display())))?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "wrote {} ({} grid boxes, {} members, {} variables, seed {})",
        data_path.display(),
        grid.n(),
        sim.csv.m,
        sim.csv.p,
        sim.seed
    );
    let _ = writeln!(s, "wrote {}", sidecar.display());
    Ok((EXIT_OK, s))
}

fn cmd_sample(cfg: &RunConfig, data_path: &Path, out_dir: &Path) -> Result<(i32, String), CliError> {
    let data = load_ensemble(data_path, cfg)?;
    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", out_dir.display())))?;
    let mut archive = run_ensemble_analysis(&cfg.sampler, &data, &cfg.priors)?;
    archive.header.variables = cfg.variable_names();
    archive.header.config_sha256 = cfg.config_hash();
    let path = out_dir.join(DEFAULT_ARCHIVE);
    archive
        .write(&path)
        .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))?;
    let mut s = String::new();
    let _ = writeln!(
        s,
        "wrote {} ({} chains x {} samples)",
        path.display(),
        archive.header.n_chains,
        archive.header.samples_per_chain
    );
    let conv = &archive.header.convergence;
    if conv.evaluated && !conv.converged {
        let _ = writeln!(
            s,
            "convergence: NOT reached (PSRF threshold {}); see `diagnose`",
            conv.threshold
        );
        Ok((EXIT_CONVERGENCE, s))
    } else {
        let _ = writeln!(
            s,
            "convergence: {}",
            if conv.evaluated { "reached" } else { "not evaluated" }
        );
        Ok((EXIT_OK, s))
    }
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

fn cmd_diagnose(path: &Path) -> Result<(i32, String), CliError> {
    let archive = read_archive(path)?;
    let h = &archive.header;
    let mut s = String::new();
    let _ = writeln!(s, "archive: {}", path.display());
    let _ = writeln!(
        s,
        "lattice {}x{}, p={}, m={}, q1={}, q2={}",
        h.dims.nx, h.dims.ny, h.dims.p, h.dims.m, h.dims.q1, h.dims.q2
    );
    let _ = writeln!(
        s,
        "{} chains x {} samples (thin {}), seed {}, library {}",
        h.n_chains, h.samples_per_chain, h.thin, h.seed, h.library_version
    );
    let _ = writeln!(s, "variables: {}", h.variables.join(", "));
    let _ = writeln!(s, "config hash: {}", h.config_sha256);
    let conv = &h.convergence;
    let _ = writeln!(
        s,
        "\nconvergence (PSRF threshold {}): {}",
        conv.threshold,
        if !conv.evaluated {
            "not evaluated"
        } else if conv.converged {
            "reached"
        } else {
            "NOT reached"
        }
    );
    let _ = writeln!(s, "{:<28} {:>10}  status", "monitored scalar", "PSRF");
    for m in &conv.monitored {
        let (value, status) = match m.psrf {
            Some(v) => (
                format!("{v:.4}"),
                if v <= conv.threshold { "ok" } else { "FAIL" },
            ),
            None => ("n/a".to_string(), "-"),
        };
        let _ = writeln!(s, "{:<28} {:>10}  {status}", m.name, value);
    }

    // Acceptance counts pooled over chains, keyed by (regime, block).
    let mut pooled: BTreeMap<(u8, String), (u64, u64)> = BTreeMap::new();
    for chain in &archive.chains {
        for rec in &chain.acceptance_log {
            let e = pooled.entry((rec.regime, rec.block.clone())).or_default();
            e.0 += rec.proposed;
            e.1 += rec.accepted;
        }
    }
    let _ = writeln!(s, "\nacceptance rates (pooled over chains)");
    let _ = writeln!(
        s,
        "{:<8} {:<20} {:>10} {:>10} {:>7}",
        "regime", "block", "proposed", "accepted", "rate"
    );
    for ((regime, block), (proposed, accepted)) in &pooled {
        let rate = if *proposed > 0 {
            format!("{:.3}", *accepted as f64 / *proposed as f64)
        } else {
            "-".into()
        };
        let _ = writeln!(
            s,
            "{:<8} {:<20} {:>10} {:>10} {:>7}",
            regime, block, proposed, accepted, rate
        );
    }
    let code = if conv.evaluated && !conv.converged {
        EXIT_CONVERGENCE
    } else {
        EXIT_OK
    };
    Ok((code, s))
}

// ---------------------------------------------------------------------------
// summarize
// ---------------------------------------------------------------------------

struct SummarizeFlags<'a> {
    prob: &'a [String],
    cluster_k: Option<usize>,
    linkage: Option<&'a str>,
    contour_boxes: &'a [usize],
    contour_level: Option<f64>,
    contour_resolution: Option<usize>,
}

fn parse_prob_spec(spec: &str) -> Result<(Direction, Threshold), CliError> {
    let bad = || {
        CliError::Config(format!(
            "bad --prob spec {spec:?}: expected DIRECTION:THRESHOLD, \
             e.g. above:median or below:-0.25"
        ))
    };
    let (d, t) = spec.split_once(':').ok_or_else(bad)?;
    let direction = match d {
        "above" => Direction::Above,
        "below" => Direction::Below,
        _ => return Err(bad()),
    };
    let threshold = match t {
        "median" | "global-median" => Threshold::Named(NamedThreshold::GlobalMedian),
        _ => Threshold::Value(t.parse::<f64>().map_err(|_| bad())?),
    };
    Ok((direction, threshold))
}

fn parse_linkage(name: &str) -> Result<Linkage, CliError> {
    match name {
        "average" => Ok(Linkage::Average),
        "complete" => Ok(Linkage::Complete),
        _ => Err(CliError::Config(format!(
            "bad --linkage {name:?}: expected average or complete"
        ))),
    }
}

fn direction_str(d: Direction) -> &'static str {
    match d {
        Direction::Above => "above",
        Direction::Below => "below",
    }
}

fn threshold_str(t: Threshold) -> String {
    match t {
        Threshold::Named(NamedThreshold::GlobalMedian) => "global-median".into(),
        Threshold::Value(v) => format!("{v}"),
    }
}

fn cmd_summarize(
    cfg: &RunConfig,
    data_path: &Path,
    out_dir: &Path,
    archive_path: &Path,
    flags: &SummarizeFlags<'_>,
) -> Result<(i32, String), CliError> {
    let archive = read_archive(archive_path)?;
    let data = load_ensemble(data_path, cfg)?;
    if !archive.header.variables.is_empty()
        && archive.header.variables != cfg.variable_names()
    {
        warn!(
            "archive variables {:?} differ from config {:?}",
            archive.header.variables,
            cfg.variable_names()
        );
    }

    // Merge CLI flags into the config's analysis requests and re-validate.
    let mut effective = cfg.clone();
    for spec in flags.prob {
        let (direction, threshold) = parse_prob_spec(spec)?;
        for j in 0..cfg.p() {
            effective.analysis.probability.push(ProbabilityRequest {
                variable: VarRef::Index(j),
                direction,
                threshold,
            });
        }
    }
    if let Some(k) = flags.cluster_k {
        let linkage = match (flags.linkage, &effective.analysis.cluster) {
            (Some(name), _) => parse_linkage(name)?,
            (None, Some(existing)) => existing.linkage,
            (None, None) => Linkage::Average,
        };
        effective.analysis.cluster = Some(ClusterRequest { k, linkage });
    } else if let (Some(name), Some(existing)) =
        (flags.linkage, &mut effective.analysis.cluster)
    {
        existing.linkage = parse_linkage(name)?;
    }
    if !flags.contour_boxes.is_empty() {
        let existing = effective.analysis.contour.take();
        effective.analysis.contour = Some(ContourRequest {
            level: flags
                .contour_level
                .or(existing.as_ref().map(|c| c.level))
                .unwrap_or(0.95),
            resolution: flags
                .contour_resolution
                .or(existing.as_ref().map(|c| c.resolution))
                .unwrap_or(64),
            boxes: flags.contour_boxes.to_vec(),
        });
    } else if let Some(existing) = &mut effective.analysis.contour {
        if let Some(level) = flags.contour_level {
            existing.level = level;
        }
        if let Some(res) = flags.contour_resolution {
            existing.resolution = res;
        }
    }
    effective.validate()?;
    let analysis = &effective.analysis;

    fs::create_dir_all(out_dir)
        .map_err(|e| CliError::Internal(format!("cannot create {}: {e}", out_dir.display())))?;
    let field = FieldSamples::from_archive(&archive, &data)?;
    let posts = fit_gridbox_posteriors(&field)?;
    let names = cfg.variable_names();
    let nx = cfg.lattice.nx;
    let loc_key = |i: usize| format!("{i},{},{}", i % nx, i / nx);
    let mut written: Vec<PathBuf> = Vec::new();
    let emit = |name: &str, text: String, written: &mut Vec<PathBuf>| -> Result<(), CliError> {
        let path = out_dir.join(name);
        write_atomic(&path, text.as_bytes())
            .map_err(|e| CliError::Internal(format!("cannot write {}: {e}", path.display())))?;
        written.push(path);
        Ok(())
    };

    // Always: per-box posterior mean and covariance.
    {
        let p = data.p();
        let mut t = String::from("location,grid_x,grid_y");
        for name in &names {
            let _ = write!(t, ",mean_{name}");
        }
        for a in 0..p {
            for b in a..p {
                let _ = write!(t, ",cov_{a}_{b}");
            }
        }
        t.push('\n');
        for post in &posts {
            let _ = write!(t, "{}", loc_key(post.location));
            for v in &post.mean {
                let _ = write!(t, ",{v}");
            }
            for a in 0..p {
                for b in a..p {
                    let _ = write!(t, ",{}", post.cov[a * p + b]);
                }
            }
            t.push('\n');
        }
        emit("posterior_summary.csv", t, &mut written)?;
    }

    if !analysis.probability.is_empty() {
        let mut t =
            String::from("request,variable,direction,threshold,location,grid_x,grid_y,probability\n");
        for (k, req) in analysis.probability.iter().enumerate() {
            let j = req.variable.resolve(&effective.variables)?;
            let probs = pointwise_probability(&field, j, req.direction, req.threshold)?;
            for (i, pr) in probs.iter().enumerate() {
                let _ = writeln!(
                    t,
                    "{k},{},{},{},{},{pr}",
                    names[j],
                    direction_str(req.direction),
                    threshold_str(req.threshold),
                    loc_key(i)
                );
            }
        }
        emit("probability.csv", t, &mut written)?;
    }

    if !analysis.joint.is_empty() {
        let mut t = String::from("request,conditions,location,grid_x,grid_y,probability\n");
        for (k, req) in analysis.joint.iter().enumerate() {
            let conditions: Vec<ProbabilityCondition> = req
                .conditions
                .iter()
                .map(|c| {
                    Ok(ProbabilityCondition {
                        variable: c.variable.resolve(&effective.variables)?,
                        direction: c.direction,
                        threshold: c.threshold,
                    })
                })
                .collect::<Result<_, CliError>>()?;
            let label = conditions
                .iter()
                .map(|c| {
                    format!(
                        "{} {} {}",
                        names[c.variable],
                        direction_str(c.direction),
                        threshold_str(c.threshold)
                    )
                })
                .collect::<Vec<_>>()
                .join(" & ");
            let probs = joint_probability(&field, &conditions)?;
            for (i, pr) in probs.iter().enumerate() {
                let _ = writeln!(t, "{k},{label},{},{pr}", loc_key(i));
            }
        }
        emit("joint_probability.csv", t, &mut written)?;
    }

    if !analysis.conditional.is_empty() {
        let mut t = String::from(
            "request,condition_variable,condition_quartile,target_variable,target_quartile,\
             scope,location,grid_x,grid_y,bin_count,probability\n",
        );
        for (k, req) in analysis.conditional.iter().enumerate() {
            let cv = req.condition_variable.resolve(&effective.variables)?;
            let tv = req.target_variable.resolve(&effective.variables)?;
            let cells = conditional_quartile_probability(
                &field,
                cv,
                req.condition_quartile,
                tv,
                req.target_quartile,
                req.scope,
            )?;
            let scope = match req.scope {
                crate::analysis::QuartileScope::PerBox => "per-box",
                crate::analysis::QuartileScope::Global => "global",
            };
            for (i, cell) in cells.iter().enumerate() {
                let pr = match cell.probability {
                    Some(v) => format!("{v}"),
                    None => "NA".into(),
                };
                let _ = writeln!(
                    t,
                    "{k},{},{},{},{},{scope},{},{},{pr}",
                    names[cv],
                    req.condition_quartile,
                    names[tv],
                    req.target_quartile,
                    loc_key(i),
                    cell.bin_count
                );
            }
        }
        emit("conditional_probability.csv", t, &mut written)?;
    }

    if let Some(cl) = &analysis.cluster {
        let kept: Vec<GridBoxPosterior> = posts
            .iter()
            .filter(|p| p.is_nondegenerate())
            .cloned()
            .collect();
        let excluded: Vec<usize> = posts
            .iter()
            .filter(|p| !p.is_nondegenerate())
            .map(|p| p.location)
            .collect();
        if !excluded.is_empty() {
            warn!(
                "excluding {} grid box(es) with degenerate covariance from clustering: {:?}",
                excluded.len(),
                excluded
            );
        }
        if kept.len() < cl.k {
            return Err(CliError::Data(format!(
                "only {} non-degenerate grid boxes, cannot form {} clusters",
                kept.len(),
                cl.k
            )));
        }
        let (labels, tree) = hierarchical_cluster(&kept, cl.linkage, cl.k)?;
        let mut label_of: BTreeMap<usize, usize> = BTreeMap::new();
        for (idx, post) in kept.iter().enumerate() {
            // Canonical label: smallest location in the cluster.
            label_of.insert(post.location, kept[labels[idx]].location);
        }
        let mut t = String::from("location,grid_x,grid_y,cluster\n");
        for post in &posts {
            let label = match label_of.get(&post.location) {
                Some(l) => l.to_string(),
                None => "NA".into(),
            };
            let _ = writeln!(t, "{},{label}", loc_key(post.location));
        }
        emit("clusters.csv", t, &mut written)?;

        let mut t = String::from("step,cluster_a,cluster_b,distance\n");
        for (step, m) in tree.merges.iter().enumerate() {
            let _ = writeln!(t, "{step},{},{},{}", m.a, m.b, m.distance);
        }
        emit("cluster_merges.csv", t, &mut written)?;
    }

    if let Some(ct) = &analysis.contour {
        let mut t = String::from("box,angle_index,x,y\n");
        for &b in &ct.boxes {
            let post = &posts[b];
            if !post.is_nondegenerate() {
                warn!("skipping contour at grid box {b}: degenerate covariance");
                continue;
            }
            let pts = contour_ellipse(post, ct.level, ct.resolution)?;
            for (k, (x, y)) in pts.iter().enumerate() {
                let _ = writeln!(t, "{b},{k},{x},{y}");
            }
        }
        emit("contours.csv", t, &mut written)?;
    }

    let mut s = String::new();
    for path in &written {
        let _ = writeln!(s, "wrote {}", path.display());
    }
    Ok((EXIT_OK, s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::archive::{
        ArchiveDims, ArchiveHeader, ChainOutput, ConvergenceReport, SampleBlocks,
    };
    use crate::dataset::EnsembleCsv;

    fn run_cli(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = cli_run(args.iter().copied(), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run_cli(&["mvmrf", "--help"]).0, EXIT_OK);
        assert_eq!(run_cli(&["mvmrf", "--version"]).0, EXIT_OK);
        assert_eq!(run_cli(&["mvmrf", "validate", "--help"]).0, EXIT_OK);
    }

    #[test]
    fn usage_errors_exit_config() {
        assert_eq!(run_cli(&["mvmrf"]).0, EXIT_CONFIG);
        assert_eq!(run_cli(&["mvmrf", "frobnicate"]).0, EXIT_CONFIG);
        assert_eq!(run_cli(&["mvmrf", "validate"]).0, EXIT_CONFIG); // no --config
    }

    #[test]
    fn missing_or_broken_config_exits_config() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.toml");
        let (code, _) = run_cli(&[
            "mvmrf",
            "validate",
            "--config",
            missing.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);

        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "[lattice]\nnx = \"many\"\n").unwrap();
        let (code, _) = run_cli(&["mvmrf", "validate", "--config", bad.to_str().unwrap()]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn prob_spec_parser() {
        assert!(matches!(
            parse_prob_spec("above:median"),
            Ok((Direction::Above, Threshold::Named(NamedThreshold::GlobalMedian)))
        ));
        assert!(matches!(
            parse_prob_spec("below:-0.25"),
            Ok((Direction::Below, Threshold::Value(v))) if v == -0.25
        ));
        assert!(parse_prob_spec("sideways:median").is_err());
        assert!(parse_prob_spec("above").is_err());
        assert!(parse_prob_spec("above:several").is_err());
    }

    /// A 2×2, p=2, m=2 workspace: config + dataset + a hand-built archive
    /// whose mean-change field is constant across samples.
    fn constant_world(dir: &Path) -> (PathBuf, PathBuf) {
        let n = 4;
        let csv = EnsembleCsv {
            m: 2,
            p: 2,
            grid_x: vec![0, 1, 0, 1],
            grid_y: vec![0, 0, 1, 1],
            latitude: vec![25.0, 25.0, 25.5, 25.5],
            longitude: vec![-125.0, -124.5, -125.0, -124.5],
            elevation: vec![100.0, 220.0, 180.0, 90.0],
            y: (0..2 * 2 * n).map(|v| v as f64 * 0.1).collect(),
        };
        let data_path = dir.join("ens.csv");
        csv.write(&data_path).unwrap();

        let config_path = dir.join("run.toml");
        std::fs::write(
            &config_path,
            r#"
                [lattice]
                nx = 2
                ny = 2

                [[variables]]
                name = "temperature"

                [[variables]]
                name = "precipitation"

                [data]
                path = "ens.csv"

                [output]
                dir = "out"
            "#,
        )
        .unwrap();

        let dims = ArchiveDims {
            nx: 2,
            ny: 2,
            p: 2,
            m: 2,
            q1: 3,
            q2: 1,
        };
        let mut blocks = SampleBlocks::empty(&dims);
        for s in 0..3 {
            blocks.alpha.push_row(&[0.0; 6]);
            blocks.beta_r.push_row(&[0.0; 4]);
            blocks.beta_bar.push_row(&[0.0; 2]);
            blocks.sigma2.push_row(&[1.0, 1.0]);
            blocks.sigma2_b.push_row(&[1.0]);
            blocks.rho.push_row(&[0.0]);
            blocks.phi.push_row(&[0.0; 4]);
            blocks.tau2.push_row(&[1.0, 1.0]);
            // Constant across samples: probabilities must be 0/1.
            let h: Vec<f64> = (0..8).map(|a| a as f64).collect();
            blocks.h_bar.push_row(&h);
            blocks.h_r.push_row(&vec![0.0; 16]);
            let _ = s;
        }
        let archive = PosteriorArchive {
            header: ArchiveHeader {
                dims,
                n_chains: 1,
                samples_per_chain: 3,
                thin: 1,
                seed: 0,
                config_sha256: String::new(),
                library_version: "test".into(),
                variables: vec!["temperature".into(), "precipitation".into()],
                convergence: ConvergenceReport::not_evaluated(),
            },
            chains: vec![ChainOutput {
                chain_id: 0,
                acceptance_log: Vec::new(),
                proposal_history: Vec::new(),
                samples: blocks,
            }],
        };
        let archive_path = dir.join("posterior.mvmf");
        archive.write(&archive_path).unwrap();
        (config_path, archive_path)
    }

    #[test]
    fn summarize_constant_archive_yields_zero_one_probabilities() {
        let dir = tempfile::tempdir().unwrap();
        let (config, archive) = constant_world(dir.path());
        let (code, out) = run_cli(&[
            "mvmrf",
            "summarize",
            "--config",
            config.to_str().unwrap(),
            "--archive",
            archive.to_str().unwrap(),
            "--prob",
            "above:median",
        ]);
        assert_eq!(code, EXIT_OK, "{out}");
        let text = std::fs::read_to_string(dir.path().join("out/probability.csv")).unwrap();
        let probs: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap())
            .collect();
        // Constant draws: every probability is exactly 0 or 1. The field at
        // the four boxes is 0,2,4,6 (temperature) and 1,3,5,7
        // (precipitation); the pooled medians are 3 and 4, so exactly the
        // two upper boxes sit strictly above for each variable.
        assert_eq!(probs, vec!["0", "0", "1", "1", "0", "0", "1", "1"]);
    }

    #[test]
    fn summarize_writes_posterior_summary_and_respects_flags() {
        let dir = tempfile::tempdir().unwrap();
        let (config, archive) = constant_world(dir.path());
        let (code, out) = run_cli(&[
            "mvmrf",
            "summarize",
            "--config",
            config.to_str().unwrap(),
            "--archive",
            archive.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK, "{out}");
        let summary =
            std::fs::read_to_string(dir.path().join("out/posterior_summary.csv")).unwrap();
        assert!(summary.starts_with(
            "location,grid_x,grid_y,mean_temperature,mean_precipitation,cov_0_0,cov_0_1,cov_1_1"
        ));
        assert_eq!(summary.lines().count(), 5);
        // Constant samples → degenerate covariance → clustering impossible.
        let (code, _) = run_cli(&[
            "mvmrf",
            "summarize",
            "--config",
            config.to_str().unwrap(),
            "--archive",
            archive.to_str().unwrap(),
            "--cluster-k",
            "2",
        ]);
        assert_eq!(code, EXIT_DATA);
        // Bad flag values are config errors.
        let (code, _) = run_cli(&[
            "mvmrf",
            "summarize",
            "--config",
            config.to_str().unwrap(),
            "--archive",
            archive.to_str().unwrap(),
            "--prob",
            "sideways:1",
        ]);
        assert_eq!(code, EXIT_CONFIG);
        let (code, _) = run_cli(&[
            "mvmrf",
            "summarize",
            "--config",
            config.to_str().unwrap(),
            "--archive",
            archive.to_str().unwrap(),
            "--contour-box",
            "99",
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn diagnose_missing_archive_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let (config, _) = constant_world(dir.path());
        let (code, _) = run_cli(&[
            "mvmrf",
            "diagnose",
            "--config",
            config.to_str().unwrap(),
            "--archive",
            dir.path().join("nope.mvmf").to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);
    }

    #[test]
    fn diagnose_prints_header_and_tables() {
        let dir = tempfile::tempdir().unwrap();
        let (config, archive) = constant_world(dir.path());
        let (code, out) = run_cli(&[
            "mvmrf",
            "diagnose",
            "--config",
            config.to_str().unwrap(),
            "--archive",
            archive.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("lattice 2x2"), "{out}");
        assert!(out.contains("not evaluated"), "{out}");
        assert!(out.contains("acceptance rates"), "{out}");
    }

    #[test]
    fn validate_reports_dimensions_and_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (config, _) = constant_world(dir.path());
        let (code, out) = run_cli(&[
            "mvmrf",
            "validate",
            "--config",
            config.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK, "{out}");
        assert!(out.contains("lattice: 2x2 (4 grid boxes)"), "{out}");
        assert!(out.contains("config hash: "), "{out}");

        // Corrupt one response cell: data error, not config error.
        let data_path = dir.path().join("ens.csv");
        let text = std::fs::read_to_string(&data_path).unwrap();
        std::fs::write(&data_path, text.replace(",0.8,", ",wat,")).unwrap();
        let (code, _) = run_cli(&[
            "mvmrf",
            "validate",
            "--config",
            config.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_DATA);

        // Remove it entirely: unresolvable path is a config error.
        std::fs::remove_file(&data_path).unwrap();
        let (code, _) = run_cli(&[
            "mvmrf",
            "validate",
            "--config",
            config.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
    }

    #[test]
    fn simulate_requires_section_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (config, _) = constant_world(dir.path());
        let (code, _) = run_cli(&[
            "mvmrf",
            "simulate",
            "--config",
            config.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_CONFIG); // no [simulate] section

        let sim_config = dir.path().join("sim.toml");
        std::fs::write(
            &sim_config,
            r#"
                [lattice]
                nx = 3
                ny = 3

                [[variables]]
                name = "temperature"

                [[variables]]
                name = "precipitation"

                [data]
                path = "sim.csv"

                [output]
                dir = "out"

                [simulate]
                m = 3
                alpha = [[0.5, -0.2, 0.1], [1.0, 0.3, -0.4]]
                beta_bar = [[2.0], [1.5]]
                sigma2 = [0.25, 0.25]
                sigma2_b = 0.1
                sigma2_h = 1.0
                rho = [-0.2]
                phi = [[0.15, 0.10], [0.05, 0.15]]
                tau2 = [1.0, 1.0]
            "#,
        )
        .unwrap();
        let args = [
            "mvmrf",
            "simulate",
            "--config",
            sim_config.to_str().unwrap(),
            "--seed",
            "7",
        ];
        let (code, out) = run_cli(&args);
        assert_eq!(code, EXIT_OK, "{out}");
        let first = std::fs::read(dir.path().join("sim.csv")).unwrap();
        let sidecar = std::fs::read_to_string(dir.path().join("sim.truth.json")).unwrap();
        assert!(sidecar.contains("\"seed\": 7"), "{sidecar}");

        let (code, _) = run_cli(&args);
        assert_eq!(code, EXIT_OK);
        assert_eq!(std::fs::read(dir.path().join("sim.csv")).unwrap(), first);

        let (code, _) = run_cli(&[
            "mvmrf",
            "simulate",
            "--config",
            sim_config.to_str().unwrap(),
            "--seed",
            "8",
        ]);
        assert_eq!(code, EXIT_OK);
        assert_ne!(std::fs::read(dir.path().join("sim.csv")).unwrap(), first);

        // The simulated dataset validates against its own config.
        let (code, out) = run_cli(&[
            "mvmrf",
            "validate",
            "--config",
            sim_config.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_OK, "{out}");
    }
}
