//! Cartesian parameter sweeps over a base config.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{config_from_value, set_path, TopologySpec};
use crate::experiment::run_experiment;
use crate::{read_file, to_json_pretty, write_file, CliError};

/// Values to sweep. Absent axes keep the base config value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    /// Applied to both weight matrices.
    #[serde(default)]
    pub topology: Option<Vec<TopologySpec>>,
    /// Applied to both weight matrices.
    #[serde(default)]
    pub laziness: Option<Vec<f64>>,
    #[serde(default)]
    pub nodes: Option<Vec<usize>>,
    #[serde(default)]
    pub alpha0: Option<Vec<f64>>,
    #[serde(default)]
    pub beta0: Option<Vec<f64>>,
    /// `β₀ = ratio·α₀`; exclusive with `beta0`.
    #[serde(default)]
    pub beta_ratio: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub topology: String,
    pub laziness: Option<f64>,
    pub nodes: Option<usize>,
    pub alpha0: Option<f64>,
    pub beta0: Option<f64>,
    pub sigma: Option<f64>,
    pub exponent: Option<f64>,
    pub final_consensus_sq: Option<f64>,
    pub final_mse: Option<f64>,
    pub consensus_avg: Option<f64>,
    pub audit_violations: Option<usize>,
    pub run_dir: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
}

pub fn load_grid(path: &Path) -> Result<SweepGrid, CliError> {
    serde_json::from_str(&read_file(path)?).map_err(|e| CliError::Parse {
        source_name: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

type Point = Vec<(&'static str, Value)>;

fn axis<T: Serialize>(
    values: &Option<Vec<T>>,
    key: &'static str,
) -> Vec<Option<(&'static str, Value)>> {
    match values {
        Some(v) => v.iter().map(|x| Some((key, json!(x)))).collect(),
        None => vec![None],
    }
}

/// Grid points in a fixed order: topology, laziness, nodes, α₀, β₀.
fn points(grid: &SweepGrid) -> Result<Vec<Point>, CliError> {
    if grid.beta0.is_some() && grid.beta_ratio.is_some() {
        return Err(CliError::Invalid(vec![
            "grid may set beta0 or beta_ratio, not both".into(),
        ]));
    }
    let axes = [
        axis(&grid.topology, "topology"),
        axis(&grid.laziness, "laziness"),
        axis(&grid.nodes, "nodes"),
        axis(&grid.alpha0, "alpha0"),
        if grid.beta_ratio.is_some() {
            axis(&grid.beta_ratio, "beta_ratio")
        } else {
            axis(&grid.beta0, "beta0")
        },
    ];
    if axes.iter().any(Vec::is_empty) {
        return Err(CliError::Invalid(vec!["grid axes must be nonempty".into()]));
    }
    let mut out: Vec<Point> = vec![Vec::new()];
    for values in &axes {
        out = out
            .iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.extend(v.clone());
                    q
                })
            })
            .collect();
    }
    Ok(out)
}

fn apply_point(base: &Value, point: &Point) -> Result<Value, CliError> {
    let mut v = base.clone();
    for (key, value) in point {
        match *key {
            "topology" | "laziness" => {
                set_path(&mut v, key, value.clone())?;
                set_path(&mut v, &format!("{key}_v"), value.clone())?;
            }
            "nodes" => {
                let field = match v.pointer("/system/kind").and_then(Value::as_str) {
                    Some("random") => "system.nodes",
                    Some("gtd_random") => "system.agents",
                    other => {
                        return Err(CliError::Invalid(vec![format!(
                            "a nodes axis needs a random or gtd_random system, got {other:?}"
                        )]))
                    }
                };
                set_path(&mut v, field, value.clone())?;
            }
            "beta_ratio" => {
                let alpha = v
                    .get("alpha0")
                    .and_then(Value::as_f64)
                    .unwrap_or(crate::config::DEFAULT_ALPHA0);
                let ratio = value.as_f64().unwrap_or(f64::NAN);
                set_path(&mut v, "beta0", json!(alpha * ratio))?;
            }
            _ => set_path(&mut v, key, value.clone())?,
        }
    }
    Ok(v)
}

fn run_point(index: usize, base: &Value, config_dir: Option<&Path>, point: &Point) -> SweepRow {
    let mut row = SweepRow {
        index,
        topology: String::new(),
        laziness: None,
        nodes: None,
        alpha0: None,
        beta0: None,
        sigma: None,
        exponent: None,
        final_consensus_sq: None,
        final_mse: None,
        consensus_avg: None,
        audit_violations: None,
        run_dir: String::new(),
        error: String::new(),
    };
    let loaded = match apply_point(base, point).and_then(|v| config_from_value(v, config_dir)) {
        Ok(l) => l,
        Err(e) => {
            row.error = e.to_string();
            return row;
        }
    };
    let cfg = &loaded.config;
    row.topology = cfg.topology.to_string();
    row.laziness = Some(cfg.laziness);
    row.alpha0 = Some(cfg.alpha0);
    row.beta0 = Some(cfg.beta0);
    match run_experiment(&loaded) {
        Ok(report) => {
            let s = &report.summary;
            row.nodes = Some(s.nodes);
            row.sigma = Some(s.sigma);
            row.exponent = s.fitted_exponent("mse_weighted");
            row.final_consensus_sq = s.final_values.map(|f| f.consensus_sq);
            row.final_mse = s.final_values.map(|f| f.mse_weighted);
            row.consensus_avg = s.consensus_avg;
            row.audit_violations = Some(s.audit.violations());
            row.run_dir = report.dir.display().to_string();
        }
        Err(e) => row.error = e.to_string(),
    }
    row
}

/// Runs every grid point. Failed points are recorded in their row and the
/// sweep continues.
/// Relative system file paths resolve against `config_dir`.
pub fn run_sweep(
    base: &Value,
    config_dir: Option<&Path>,
    grid: &SweepGrid,
) -> Result<SweepReport, CliError> {
    let pts = points(grid)?;
    let output = base
        .get("output")
        .and_then(Value::as_str)
        .unwrap_or(crate::config::DEFAULT_OUTPUT);
    let digest = Sha256::digest(format!("{base}{}", serde_json::to_string(grid)?).as_bytes());
    let dir = Path::new(output).join(format!("sweep-{}", &hex::encode(digest)[..16]));
    log::info!("sweep of {} points into {}", pts.len(), dir.display());

    let rows: Vec<SweepRow> = pts
        .par_iter()
        .enumerate()
        .map(|(i, p)| run_point(i, base, config_dir, p))
        .collect();
    for r in rows.iter().filter(|r| !r.error.is_empty()) {
        log::warn!("sweep point {} failed: {}", r.index, r.error);
    }

    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let csv_path = dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CliError::io(&csv_path, e))?;
    write_file(&dir.join("sweep.json"), &to_json_pretty(&rows)?)?;
    Ok(SweepReport { dir, rows })
}
