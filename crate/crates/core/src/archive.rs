//! Binary posterior-sample archive.
//!
//! A run of the sampler produces, per chain, a set of thinned parameter
//! trajectories plus Metropolis bookkeeping. Text serialization is
//! impractical at 10⁴ samples × 10⁴ parameters, so the archive is a simple
//! little-endian binary layout with an explicit version byte, JSON headers
//! for the self-describing metadata, raw f64 blocks for the trajectories,
//! and a SHA-256 checksum footer. The layout is documented byte-exactly in
//! `docs/archive_format.md`; writes are atomic (temp file + rename) so an
//! interrupted run never leaves a truncated archive behind.
//!
//! The reader is deliberately defensive: every length is validated against
//! the remaining input before allocation, so arbitrary bytes (including
//! fuzzer input) produce an [`ArchiveError`], never a panic or an
//! out-of-memory allocation.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Format magic, version, and reader limits.
pub const ARCHIVE_MAGIC: [u8; 4] = *b"MVMF";
pub const ARCHIVE_VERSION: u8 = 1;
const MAX_JSON_LEN: usize = 1 << 24;
const MAX_NAME_LEN: usize = 64;
const MAX_CHAINS: usize = 4096;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an archive: bad magic bytes")]
    BadMagic,
    #[error("unsupported archive version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated archive while reading {what}")]
    Truncated { what: &'static str },
    #[error("archive {what} length {got} exceeds limit {limit}")]
    TooLarge {
        what: &'static str,
        got: usize,
        limit: usize,
    },
    #[error("malformed {what} JSON: {source}")]
    Json {
        what: &'static str,
        #[source]
        source: serde_json::Error,
    },
    #[error("block {index}: expected name {expected:?}, found {found:?}")]
    BlockName {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("block {name}: dimensions {rows}×{cols} do not match header ({expected_rows}×{expected_cols})")]
    BlockShape {
        name: String,
        rows: usize,
        cols: usize,
        expected_rows: usize,
        expected_cols: usize,
    },
    #[error("checksum mismatch: archive is corrupt")]
    ChecksumMismatch,
    #[error("trailing bytes after archive footer")]
    TrailingBytes,
    #[error("invalid header field {what}")]
    InvalidHeader { what: &'static str },
}

// ---------------------------------------------------------------------------
// Payload containers
// ---------------------------------------------------------------------------

/// Column-oriented sample block: `rows` retained draws of a `cols`-dimensional
/// parameter group, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(cols: usize) -> Self {
        SampleMatrix {
            rows: 0,
            cols,
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        SampleMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.data[s * self.cols..(s + 1) * self.cols]
    }

    pub fn get(&self, s: usize, k: usize) -> f64 {
        self.data[s * self.cols + k]
    }

    /// One parameter's trajectory across all retained draws.
    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|s| self.get(s, k)).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Identifiers of the ten per-chain sample blocks, in archive order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockId {
    Alpha,
    BetaR,
    BetaBar,
    Sigma2,
    Sigma2B,
    Rho,
    Phi,
    Tau2,
    HBar,
    HR,
}

impl BlockId {
    pub const ALL: [BlockId; 10] = [
        BlockId::Alpha,
        BlockId::BetaR,
        BlockId::BetaBar,
        BlockId::Sigma2,
        BlockId::Sigma2B,
        BlockId::Rho,
        BlockId::Phi,
        BlockId::Tau2,
        BlockId::HBar,
        BlockId::HR,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockId::Alpha => "alpha",
            BlockId::BetaR => "beta_r",
            BlockId::BetaBar => "beta_bar",
            BlockId::Sigma2 => "sigma2",
            BlockId::Sigma2B => "sigma2_b",
            BlockId::Rho => "rho",
            BlockId::Phi => "phi",
            BlockId::Tau2 => "tau2",
            BlockId::HBar => "h_bar",
            BlockId::HR => "h_r",
        }
    }
}

/// The thinned trajectories of one chain, one matrix per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlocks {
    pub alpha: SampleMatrix,
    pub beta_r: SampleMatrix,
    pub beta_bar: SampleMatrix,
    pub sigma2: SampleMatrix,
    pub sigma2_b: SampleMatrix,
    pub rho: SampleMatrix,
    pub phi: SampleMatrix,
    pub tau2: SampleMatrix,
    pub h_bar: SampleMatrix,
    pub h_r: SampleMatrix,
}

impl SampleBlocks {
    /// Empty blocks sized for the given model dimensions.
    pub fn empty(dims: &ArchiveDims) -> Self {
        let dim = dims.spatial_dim();
        SampleBlocks {
            alpha: SampleMatrix::new(dims.p * dims.q1),
            beta_r: SampleMatrix::new(dims.m * dims.p * dims.q2),
            beta_bar: SampleMatrix::new(dims.p * dims.q2),
            sigma2: SampleMatrix::new(dims.p),
            sigma2_b: SampleMatrix::new(1),
            rho: SampleMatrix::new(dims.p * (dims.p - 1) / 2),
            phi: SampleMatrix::new(dims.p * dims.p),
            tau2: SampleMatrix::new(dims.p),
            h_bar: SampleMatrix::new(dim),
            h_r: SampleMatrix::new(dims.m * dim),
        }
    }

    pub fn get(&self, id: BlockId) -> &SampleMatrix {
        match id {
            BlockId::Alpha => &self.alpha,
            BlockId::BetaR => &self.beta_r,
            BlockId::BetaBar => &self.beta_bar,
            BlockId::Sigma2 => &self.sigma2,
            BlockId::Sigma2B => &self.sigma2_b,
            BlockId::Rho => &self.rho,
            BlockId::Phi => &self.phi,
            BlockId::Tau2 => &self.tau2,
            BlockId::HBar => &self.h_bar,
            BlockId::HR => &self.h_r,
        }
    }

    fn get_mut(&mut self, id: BlockId) -> &mut SampleMatrix {
        match id {
            BlockId::Alpha => &mut self.alpha,
            BlockId::BetaR => &mut self.beta_r,
            BlockId::BetaBar => &mut self.beta_bar,
            BlockId::Sigma2 => &mut self.sigma2,
            BlockId::Sigma2B => &mut self.sigma2_b,
            BlockId::Rho => &mut self.rho,
            BlockId::Phi => &mut self.phi,
            BlockId::Tau2 => &mut self.tau2,
            BlockId::HBar => &mut self.h_bar,
            BlockId::HR => &mut self.h_r,
        }
    }
}

/// One adaptive-Metropolis bookkeeping entry: proposals and acceptances of
/// one block within one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceRecord {
    pub regime: u8,
    pub block: String,
    pub proposed: u64,
    pub accepted: u64,
}

impl AcceptanceRecord {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

/// Snapshot of a proposal distribution at an adaptation boundary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSnapshot {
    pub iteration: u64,
    pub regime: u8,
    pub block: String,
    pub scale: f64,
    /// Row-major proposal covariance for joint blocks; None for scalars.
    pub cov: Option<Vec<f64>>,
}

/// Everything one chain contributes to the archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub chain_id: usize,
    pub acceptance_log: Vec<AcceptanceRecord>,
    pub proposal_history: Vec<ProposalSnapshot>,
    pub samples: SampleBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainMeta {
    chain_id: usize,
    acceptance_log: Vec<AcceptanceRecord>,
    proposal_history: Vec<ProposalSnapshot>,
}

// ---------------------------------------------------------------------------
// Header
// ---------------------------------------------------------------------------

/// Model dimensions stored in the archive header; everything the reader
/// needs to validate block shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveDims {
    pub nx: usize,
    pub ny: usize,
    pub p: usize,
    pub m: usize,
    pub q1: usize,
    pub q2: usize,
}

impl ArchiveDims {
    pub fn spatial_dim(&self) -> usize {
        self.nx * self.ny * self.p
    }

    fn validate(&self) -> Result<(), ArchiveError> {
        const LIM: usize = 1 << 20;
        for (what, v) in [
            ("nx", self.nx),
            ("ny", self.ny),
            ("p", self.p),
            ("m", self.m),
            ("q1", self.q1),
            ("q2", self.q2),
        ] {
            if v == 0 || v > LIM {
                return Err(ArchiveError::InvalidHeader { what });
            }
        }
        Ok(())
    }

    fn expected_cols(&self, id: BlockId) -> usize {
        let dim = self.spatial_dim();
        match id {
            BlockId::Alpha => self.p * self.q1,
            BlockId::BetaR => self.m * self.p * self.q2,
            BlockId::BetaBar => self.p * self.q2,
            BlockId::Sigma2 => self.p,
            BlockId::Sigma2B => 1,
            BlockId::Rho => self.p * (self.p - 1) / 2,
            BlockId::Phi => self.p * self.p,
            BlockId::Tau2 => self.p,
            BlockId::HBar => dim,
            BlockId::HR => self.m * dim,
        }
    }
}

/// Per-scalar convergence diagnostic carried in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitoredScalar {
    pub name: String,
    /// Potential scale reduction factor; None when the scalar had zero
    /// within-chain variance (degenerate, typically a constant trajectory).
    pub psrf: Option<f64>,
}

/// Convergence summary of a multi-chain run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub threshold: f64,
    /// False when too few chains or draws were available to evaluate.
    pub evaluated: bool,
    pub converged: bool,
    pub monitored: Vec<MonitoredScalar>,
}

impl ConvergenceReport {
    pub fn not_evaluated() -> Self {
        ConvergenceReport {
            threshold: crate::sampler::PSRF_THRESHOLD,
            evaluated: false,
            converged: true,
            monitored: Vec::new(),
        }
    }
}

/// Archive header: model dimensions, provenance, and convergence summary.
/// Deliberately free of timestamps so identical runs produce identical
/// bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub dims: ArchiveDims,
    pub n_chains: usize,
    pub samples_per_chain: usize,
    pub thin: usize,
    pub seed: u64,
    pub config_sha256: String,
    pub library_version: String,
    pub variables: Vec<String>,
    pub convergence: ConvergenceReport,
}

// ---------------------------------------------------------------------------
// Archive
// ---------------------------------------------------------------------------

/// A complete posterior archive: header plus every chain's output.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorArchive {
    pub header: ArchiveHeader,
    pub chains: Vec<ChainOutput>,
}

impl PosteriorArchive {
    /// Total retained draws across chains.
    pub fn n_samples(&self) -> usize {
        self.chains.iter().map(|c| c.samples.alpha.rows()).sum()
    }

    /// Pools one block across chains, in chain order.
    pub fn pooled(&self, id: BlockId) -> SampleMatrix {
        let cols = self.header.dims.expected_cols(id);
        let mut out = SampleMatrix::new(cols);
        for chain in &self.chains {
            let m = chain.samples.get(id);
            for s in 0..m.rows() {
                out.push_row(m.row(s));
            }
        }
        out
    }

    /// Serializes the archive to its binary representation.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&ARCHIVE_MAGIC);
        buf.push(ARCHIVE_VERSION);
        let header = serde_json::to_vec(&self.header).expect("header serialization");
        buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
        buf.extend_from_slice(&header);
        for chain in &self.chains {
            let meta = ChainMeta {
                chain_id: chain.chain_id,
                acceptance_log: chain.acceptance_log.clone(),
                proposal_history: chain.proposal_history.clone(),
            };
            let meta = serde_json::to_vec(&meta).expect("chain meta serialization");
            buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
            buf.extend_from_slice(&meta);
            for id in BlockId::ALL {
                let m = chain.samples.get(id);
                let name = id.name().as_bytes();
                buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
                buf.extend_from_slice(name);
                buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                for v in m.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    /// Parses and fully validates an archive from bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ArchiveError> {
        if bytes.len() < 32 {
            return Err(ArchiveError::Truncated { what: "footer" });
        }
        let (body, footer) = bytes.split_at(bytes.len() - 32);
        let digest = Sha256::digest(body);
        if digest.as_slice() != footer {
            return Err(ArchiveError::ChecksumMismatch);
        }
        let mut cur = Reader { buf: body, pos: 0 };
        let magic = cur.take(4, "magic")?;
        if magic != ARCHIVE_MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        let version = cur.u8("version")?;
        if version != ARCHIVE_VERSION {
            return Err(ArchiveError::UnsupportedVersion(version));
        }
        let header: ArchiveHeader = cur.json("header")?;
        header.dims.validate()?;
        if header.n_chains > MAX_CHAINS {
            return Err(ArchiveError::TooLarge {
                what: "chain count",
                got: header.n_chains,
                limit: MAX_CHAINS,
            });
        }
        let mut chains = Vec::with_capacity(header.n_chains.min(64));
        for _ in 0..header.n_chains {
            let meta: ChainMeta = cur.json("chain meta")?;
            let mut samples = SampleBlocks::empty(&header.dims);
            for (index, id) in BlockId::ALL.into_iter().enumerate() {
                let name = cur.name(index)?;
                if name != id.name() {
                    return Err(ArchiveError::BlockName {
                        index,
                        expected: id.name().to_owned(),
                        found: name,
                    });
                }
                let rows = cur.u32("block rows")? as usize;
                let cols = cur.u32("block cols")? as usize;
                let expected_cols = header.dims.expected_cols(id);
                if cols != expected_cols || rows != header.samples_per_chain {
                    return Err(ArchiveError::BlockShape {
                        name: name.clone(),
                        rows,
                        cols,
                        expected_rows: header.samples_per_chain,
                        expected_cols,
                    });
                }
                let count = rows
                    .checked_mul(cols)
                    .ok_or(ArchiveError::Truncated { what: "block data" })?;
                let raw = cur.take(
                    count
                        .checked_mul(8)
                        .ok_or(ArchiveError::Truncated { what: "block data" })?,
                    "block data",
                )?;
                let mut data = Vec::with_capacity(count);
                for chunk in raw.chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
                *samples.get_mut(id) = SampleMatrix::from_rows(rows, cols, data);
            }
            chains.push(ChainOutput {
                chain_id: meta.chain_id,
                acceptance_log: meta.acceptance_log,
                proposal_history: meta.proposal_history,
                samples,
            });
        }
        if cur.pos != body.len() {
            return Err(ArchiveError::TrailingBytes);
        }
        Ok(PosteriorArchive { header, chains })
    }

    /// Writes the archive atomically: serialize to a sibling temp file, then
    /// rename into place.
    pub fn write(&self, path: &Path) -> Result<(), ArchiveError> {
        let bytes = self.to_bytes();
        write_atomic(path, &bytes)?;
        Ok(())
    }

    /// Reads and validates an archive file.
    pub fn read(path: &Path) -> Result<Self, ArchiveError> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

/// Writes bytes to `path` via a same-directory temp file and an atomic
/// rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), std::io::Error> {
    let tmp = {
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(format!(".tmp{}", std::process::id()));
        path.with_file_name(name)
    };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    match fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

/// Bounds-checked little-endian reader over the archive body.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ArchiveError> {
        if self.buf.len() - self.pos < n {
            return Err(ArchiveError::Truncated { what });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ArchiveError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, ArchiveError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn json<T: serde::de::DeserializeOwned>(
        &mut self,
        what: &'static str,
    ) -> Result<T, ArchiveError> {
        let len = self.u32(what)? as usize;
        if len > MAX_JSON_LEN {
            return Err(ArchiveError::TooLarge {
                what,
                got: len,
                limit: MAX_JSON_LEN,
            });
        }
        let raw = self.take(len, what)?;
        serde_json::from_slice(raw).map_err(|source| ArchiveError::Json { what, source })
    }

    fn name(&mut self, index: usize) -> Result<String, ArchiveError> {
        let len = self.u16("block name")? as usize;
        if len > MAX_NAME_LEN {
            return Err(ArchiveError::TooLarge {
                what: "block name",
                got: len,
                limit: MAX_NAME_LEN,
            });
        }
        let raw = self.take(len, "block name")?;
        String::from_utf8(raw.to_vec()).map_err(|_| ArchiveError::BlockName {
            index,
            expected: String::new(),
            found: format!("{raw:?}"),
        })
    }
}
