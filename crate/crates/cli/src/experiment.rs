//! Replica orchestration and run-directory persistence.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use twoscale::algorithm::{run, AlgorithmError, RunOptions};
use twoscale::analysis::AuditReport;

use crate::config::{ExperimentConfig, LoadedConfig};
use crate::setup::{build_setup, Setup};
use crate::summary::{mean_rows, summarize, MeanRow, Row, Summary};
use crate::{derive_seed, read_file, to_json_pretty, write_file, CliError};

pub const REPLICA_COLUMNS: [&str; 8] = [
    "k",
    "alpha",
    "beta",
    "V",
    "consensus_sq",
    "mse_weighted",
    "xbar_err",
    "ybar_err",
];

pub const MEAN_COLUMNS: [&str; 11] = [
    "k",
    "alpha",
    "beta",
    "V",
    "consensus_sq",
    "consensus_sq_max",
    "mse_weighted",
    "mse_weighted_se",
    "xbar_err",
    "ybar_err",
    "central_err",
];

const CONFIG_FILE: &str = "config.json";
const MEAN_FILE: &str = "mean.csv";
const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReplicaMeta {
    replica: usize,
    seed: u64,
    audit: Option<AuditReport>,
    final_k: usize,
    final_xbar: Vec<f64>,
    final_ybar: Vec<f64>,
}

struct ReplicaOutput {
    rows: Vec<Row>,
    meta: ReplicaMeta,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub summary: Summary,
}

impl RunReport {
    pub fn audit_passed(&self) -> bool {
        self.summary.audit.violations() == 0
    }
}

/// SHA-256 of the canonical config JSON with the output location removed.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut value = serde_json::to_value(cfg).expect("config serializes");
    if let Some(map) = value.as_object_mut() {
        map.remove("output");
    }
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output.join(format!("run-{}", &config_hash(cfg)[..16]))
}

fn replica_stem(i: usize) -> String {
    format!("replica_{i:03}")
}

fn run_replica(
    setup: &Setup,
    cfg: &ExperimentConfig,
    audit: bool,
    replica: usize,
) -> Result<ReplicaOutput, CliError> {
    let seed = derive_seed(cfg.seed, replica as u64);
    let mut noise = setup.make_noise(seed);
    let mut opts = RunOptions::new(cfg.iterations, cfg.record_every);
    if audit {
        opts.audit = setup.params.clone();
    }
    let out = run(
        &setup.system,
        &setup.w,
        &setup.v,
        &setup.schedule,
        noise.as_mut(),
        &setup.solution,
        &opts,
    )
    .map_err(|e| match e {
        AlgorithmError::Diverged { k } => CliError::Diverged { replica, k },
        e => CliError::Replica {
            replica,
            message: e.to_string(),
        },
    })?;
    let rows = out
        .trajectory
        .records
        .iter()
        .map(|r| Row {
            k: r.k as u64,
            alpha: r.alpha,
            beta: r.beta,
            v: r.v,
            consensus_sq: r.consensus_sq,
            mse_weighted: r.mse_weighted,
            xbar_err: r.xbar_err,
            ybar_err: r.ybar_err,
        })
        .collect();
    Ok(ReplicaOutput {
        rows,
        meta: ReplicaMeta {
            replica,
            seed,
            audit: out.audit,
            final_k: out.final_state.k,
            final_xbar: out.final_state.xbar().into_vec(),
            final_ybar: out.final_state.ybar().into_vec(),
        },
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<Result<Vec<T>, _>>()?;
    Ok(rows)
}

/// Runs every replica, writes the run directory and returns its summary.
pub fn run_experiment(loaded: &LoadedConfig) -> Result<RunReport, CliError> {
    let cfg = &loaded.config;
    for d in &loaded.defaults_applied {
        log::info!("default applied: {d}");
    }
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    let setup = build_setup(cfg)?;
    let audit = loaded.audit_enabled() && setup.params.is_some();
    let hash = config_hash(cfg);
    let dir = run_dir(cfg);
    log::info!(
        "run {}: N = {}, d = {}, σ = {:.6}, {} replicas × {} iterations",
        &hash[..16],
        setup.system.nodes(),
        setup.system.d(),
        setup.sigma,
        cfg.replicas,
        cfg.iterations
    );

    let outputs = (0..cfg.replicas)
        .into_par_iter()
        .map(|i| run_replica(&setup, cfg, audit, i))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;

    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_file(&dir.join(CONFIG_FILE), &to_json_pretty(loaded)?)?;
    for out in &outputs {
        let stem = replica_stem(out.meta.replica);
        write_csv(&dir.join(format!("{stem}.csv")), &out.rows)?;
        write_file(
            &dir.join(format!("{stem}.json")),
            &to_json_pretty(&out.meta)?,
        )?;
    }
    let (rows, audits): (Vec<Vec<Row>>, Vec<Option<AuditReport>>) =
        outputs.into_iter().map(|o| (o.rows, o.meta.audit)).unzip();
    finish(loaded, &hash, &setup, &dir, &rows, &audits)
}

fn read_audits(dir: &Path, replicas: usize) -> Result<Vec<Option<AuditReport>>, CliError> {
    (0..replicas)
        .map(|i| {
            let path = dir.join(format!("{}.json", replica_stem(i)));
            let meta: ReplicaMeta = serde_json::from_str(&read_file(&path)?)?;
            if meta.replica != i {
                return Err(CliError::Corrupt(format!(
                    "{} names replica {}",
                    path.display(),
                    meta.replica
                )));
            }
            Ok(meta.audit)
        })
        .collect()
}

fn finish(
    loaded: &LoadedConfig,
    hash: &str,
    setup: &Setup,
    dir: &Path,
    rows: &[Vec<Row>],
    audits: &[Option<AuditReport>],
) -> Result<RunReport, CliError> {
    let mean: Vec<MeanRow> = mean_rows(rows);
    write_csv(&dir.join(MEAN_FILE), &mean)?;
    let summary = summarize(loaded, hash, setup, &mean, audits);
    write_file(&dir.join(SUMMARY_FILE), &to_json_pretty(&summary)?)?;
    Ok(RunReport {
        dir: dir.to_path_buf(),
        summary,
    })
}

/// Recomputes `mean.csv` and `summary.json` from the stored config and
/// replica files of a run directory.
pub fn analyze_run(dir: &Path) -> Result<RunReport, CliError> {
    let loaded: LoadedConfig = serde_json::from_str(&read_file(&dir.join(CONFIG_FILE))?)?;
    let cfg = &loaded.config;
    let setup = build_setup(cfg)?;
    let rows = (0..cfg.replicas)
        .map(|i| read_csv::<Row>(&dir.join(format!("{}.csv", replica_stem(i)))))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(bad) = rows.iter().position(|r| r.len() != rows[0].len()) {
        return Err(CliError::Corrupt(format!(
            "replica {bad} has {} records, replica 0 has {}",
            rows[bad].len(),
            rows[0].len()
        )));
    }
    let audits = read_audits(dir, cfg.replicas)?;
    finish(&loaded, &config_hash(cfg), &setup, dir, &rows, &audits)
}
