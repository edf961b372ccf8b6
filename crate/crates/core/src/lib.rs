//! Multivariate Markov random field analysis of gridded ensemble output.
//!
//! This crate fits a hierarchical spatial model to multi-member runs of a
//! gridded simulation (the motivating case: regional climate-model change
//! fields for several variables at once). The pieces, bottom to top:
//!
//! * [`lattice`] — grid graphs and the stacked (location, variable) indexing;
//! * [`sparse`] / [`precision`] — the joint sparse precision matrix of the
//!   multivariate conditional-autoregression, assembled from within-location
//!   dependence ρ, cross-location dependence Φ, and conditional variances τ²;
//! * [`chol`] — a sparse Cholesky engine with a reusable symbolic step, the
//!   workhorse behind every Gaussian draw and Metropolis ratio;
//! * [`model`] — the three-level hierarchical model (data, process, priors)
//!   and its full-conditional update kernels;
//! * [`sampler`] — multi-chain MCMC with the three-regime adaptive schedule
//!   and convergence diagnostics;
//! * [`analysis`] — posterior products: probability fields, symmetrized-KL
//!   clustering of grid boxes, bivariate contour ellipses;
//! * [`config`] / [`dataset`] / [`archive`] / [`cli`] — run configuration,
//!   dataset ingestion and simulation, the binary sample archive, and the
//!   command-line surface.

pub mod analysis;
pub mod archive;
pub mod chol;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dense;
pub mod lattice;
pub mod model;
pub mod precision;
pub mod sampler;
pub mod sparse;
