//! Experiment harness for distributed two-time-scale stochastic approximation.
//!
//! A run directory holds:
//!
//! | file | content |
//! |------|---------|
//! | `config.json` | resolved config, applied defaults and warnings |
//! | `replica_NNN.csv` | one trajectory, columns [`REPLICA_COLUMNS`] |
//! | `replica_NNN.json` | replica seed, audit report and final averages |
//! | `mean.csv` | replica averages, columns [`MEAN_COLUMNS`] |
//! | `summary.json` | constants, fits, audit totals and bound curves |

use std::path::{Path, PathBuf};

use thiserror::Error;

pub mod config;
pub mod experiment;
pub mod setup;
pub mod summary;
pub mod sweep;

pub use config::{load_config, ExperimentConfig, LoadedConfig};
pub use experiment::{analyze_run, run_experiment, RunReport, MEAN_COLUMNS, REPLICA_COLUMNS};
pub use setup::{build_setup, validate_config, Setup, ValidationReport};
pub use summary::Summary;
pub use sweep::{load_grid, run_sweep, SweepGrid, SweepRow};

/// Environment variable capping the worker threads.
pub const WORKERS_ENV: &str = "TWOSCALE_WORKERS";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{source_name}: parse error at line {line}, column {column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config:\n  - {}", .0.join("\n  - "))]
    Invalid(Vec<String>),
    #[error("bad override: {0}")]
    Override(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("replica {replica} diverged at k = {k}")]
    Diverged { replica: usize, k: usize },
    #[error("replica {replica} failed: {message}")]
    Replica { replica: usize, message: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("corrupt run directory: {0}")]
    Corrupt(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Derives an independent stream seed from a base seed and an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub(crate) fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub(crate) fn to_json_pretty<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}
