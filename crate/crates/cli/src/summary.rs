//! Replica aggregation and the analysis summary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use twoscale::analysis::{
    fit_lemma2_constants, fit_power_law, lemma1_bound, lemma2_bound, sigma_power_threshold,
    theorem1_bound, AuditReport, RateFit,
};

use crate::config::LoadedConfig;
use crate::setup::Setup;

/// One recorded iterate of one replica.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub k: u64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub consensus_sq: f64,
    pub mse_weighted: f64,
    pub xbar_err: f64,
    pub ybar_err: f64,
}

/// Replica averages at one recorded `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub k: u64,
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "V")]
    pub v: f64,
    pub consensus_sq: f64,
    pub consensus_sq_max: f64,
    pub mse_weighted: f64,
    pub mse_weighted_se: f64,
    pub xbar_err: f64,
    pub ybar_err: f64,
    /// `‖x̄ − x*‖² γ_k + ‖ȳ − y*‖²`.
    pub central_err: f64,
}

/// Averages replicas record by record. All replicas share the same `k` grid.
pub fn mean_rows(replicas: &[Vec<Row>]) -> Vec<MeanRow> {
    let Some(first) = replicas.first() else {
        return Vec::new();
    };
    let r = replicas.len() as f64;
    (0..first.len())
        .map(|i| {
            let at = |f: fn(&Row) -> f64| replicas.iter().map(|rows| f(&rows[i])).sum::<f64>() / r;
            let base = first[i];
            let mse = at(|x| x.mse_weighted);
            let var = if replicas.len() > 1 {
                replicas
                    .iter()
                    .map(|rows| (rows[i].mse_weighted - mse).powi(2))
                    .sum::<f64>()
                    / (r - 1.0)
            } else {
                0.0
            };
            let xbar_err = at(|x| x.xbar_err);
            let ybar_err = at(|x| x.ybar_err);
            MeanRow {
                k: base.k,
                alpha: base.alpha,
                beta: base.beta,
                v: at(|x| x.v),
                consensus_sq: at(|x| x.consensus_sq),
                consensus_sq_max: replicas
                    .iter()
                    .map(|rows| rows[i].consensus_sq)
                    .fold(0.0, f64::max),
                mse_weighted: mse,
                mse_weighted_se: (var / r).sqrt(),
                xbar_err,
                ybar_err,
                central_err: ybar_err + base.beta / base.alpha * xbar_err,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub enabled: bool,
    pub totals: Option<AuditReport>,
    pub per_replica_violations: Vec<usize>,
}

impl AuditSummary {
    pub fn violations(&self) -> usize {
        self.per_replica_violations.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Constants {
    pub d0: f64,
    pub d1: f64,
    /// `"supplied"` or `"fitted"`.
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceCheck {
    pub checked: usize,
    pub violations: usize,
    /// The check holds only relative to the centralized constants used.
    pub conditional_on: Lemma2Constants,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalValues {
    pub k: u64,
    pub consensus_sq: f64,
    pub mse_weighted: f64,
    pub mse_weighted_se: f64,
    pub xbar_err: f64,
    pub ybar_err: f64,
}

/// Bound and measured curves aligned by `k`. Infinite bounds appear as null.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Curves {
    pub k: Vec<u64>,
    pub consensus_sq_mean: Vec<f64>,
    pub consensus_sq_max: Vec<f64>,
    pub lemma1_bound: Vec<Option<f64>>,
    pub mse_weighted_mean: Vec<f64>,
    pub theorem1_bound: Vec<Option<f64>>,
    pub central_err_mean: Vec<f64>,
    pub lemma2_bound: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub nodes: usize,
    pub d: usize,
    pub replicas: usize,
    pub iterations: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub scale: f64,
    pub sigma_w: f64,
    pub sigma_v: f64,
    pub sigma: f64,
    pub delta: Option<f64>,
    pub kstar: Option<u64>,
    pub constant_d: Option<f64>,
    pub r: f64,
    pub noise_bound: Option<f64>,
    pub sigma_power_threshold: Option<u64>,
    pub x_star: Vec<f64>,
    pub y_star: Vec<f64>,
    pub audit: AuditSummary,
    pub fits: BTreeMap<String, Option<RateFit>>,
    pub lemma2: Lemma2Constants,
    pub theorem1_dominance: Option<DominanceCheck>,
    pub final_values: Option<FinalValues>,
    /// Mean of `consensus_sq` over recorded `k` in the consensus window.
    pub consensus_avg: Option<f64>,
    pub warnings: Vec<String>,
    pub defaults_applied: Vec<String>,
    pub curves: Curves,
}

impl Summary {
    pub fn fitted_exponent(&self, metric: &str) -> Option<f64> {
        self.fits.get(metric).copied().flatten().map(|f| f.exponent)
    }
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

const FITTED_METRICS: [&str; 6] = [
    "mse_weighted",
    "consensus_sq",
    "V",
    "xbar_err",
    "ybar_err",
    "central_err",
];

fn column(rows: &[MeanRow], name: &str) -> Vec<f64> {
    rows.iter()
        .map(|r| match name {
            "mse_weighted" => r.mse_weighted,
            "consensus_sq" => r.consensus_sq,
            "V" => r.v,
            "xbar_err" => r.xbar_err,
            "ybar_err" => r.ybar_err,
            "central_err" => r.central_err,
            _ => unreachable!("unknown column {name}"),
        })
        .collect()
}

pub fn summarize(
    loaded: &LoadedConfig,
    config_hash: &str,
    setup: &Setup,
    mean: &[MeanRow],
    audits: &[Option<AuditReport>],
) -> Summary {
    let cfg = &loaded.config;
    let mut warnings = loaded.warnings.clone();
    let audit_enabled = loaded.audit_enabled() && setup.params.is_some();
    if loaded.audit_enabled() && setup.params.is_none() {
        warnings.push("noise has no sure bound; the proof audit is disabled".into());
    }
    let audit = if audit_enabled {
        let mut totals = AuditReport::default();
        for a in audits.iter().flatten() {
            totals.merge(a);
        }
        AuditSummary {
            enabled: true,
            totals: Some(totals),
            per_replica_violations: audits
                .iter()
                .map(|a| a.as_ref().map_or(0, AuditReport::total_violations))
                .collect(),
        }
    } else {
        AuditSummary {
            enabled: false,
            totals: None,
            per_replica_violations: vec![0; audits.len()],
        }
    };

    let ks: Vec<u64> = mean.iter().map(|r| r.k).collect();
    let window = (cfg.fit_window[0], cfg.fit_window[1]);
    let mut fits = BTreeMap::new();
    for name in FITTED_METRICS {
        let points: Vec<(f64, f64)> = ks
            .iter()
            .zip(column(mean, name))
            .map(|(&k, v)| (k as f64, v))
            .collect();
        let fit = match fit_power_law(&points, window) {
            Ok(f) => Some(f),
            Err(e) => {
                warnings.push(format!("no rate fit for {name}: {e}"));
                None
            }
        };
        fits.insert(name.to_string(), fit);
    }

    let central: Vec<(u64, f64)> = mean.iter().map(|r| (r.k, r.central_err)).collect();
    let lemma2 = match (cfg.d0, cfg.d1) {
        (Some(d0), Some(d1)) => Lemma2Constants {
            d0,
            d1,
            source: "supplied".into(),
        },
        _ => {
            let fit = fit_lemma2_constants(&central);
            Lemma2Constants {
                d0: cfg.d0.unwrap_or(fit.d0),
                d1: cfg.d1.unwrap_or(fit.d1),
                source: "fitted".into(),
            }
        }
    };

    let mut curves = Curves {
        k: ks.clone(),
        consensus_sq_mean: column(mean, "consensus_sq"),
        consensus_sq_max: mean.iter().map(|r| r.consensus_sq_max).collect(),
        mse_weighted_mean: column(mean, "mse_weighted"),
        central_err_mean: column(mean, "central_err"),
        lemma2_bound: ks
            .iter()
            .map(|&k| finite(lemma2_bound(k, lemma2.d0, lemma2.d1)))
            .collect(),
        ..Curves::default()
    };
    let mut theorem1_dominance = None;
    if let Some(p) = &setup.params {
        let mut p = p.clone();
        p.d0 = lemma2.d0;
        p.d1 = lemma2.d1;
        curves.lemma1_bound = ks.iter().map(|&k| finite(lemma1_bound(k, &p))).collect();
        curves.theorem1_bound = ks.iter().map(|&k| finite(theorem1_bound(k, &p))).collect();
        let mut check = DominanceCheck {
            checked: 0,
            violations: 0,
            conditional_on: lemma2.clone(),
        };
        for (bound, r) in curves.theorem1_bound.iter().zip(mean) {
            if let Some(b) = bound {
                check.checked += 1;
                check.violations += usize::from(r.mse_weighted > *b);
            }
        }
        theorem1_dominance = Some(check);
    }

    let cw = cfg.consensus_window;
    let inside: Vec<f64> = mean
        .iter()
        .filter(|r| r.k >= cw[0] && r.k <= cw[1])
        .map(|r| r.consensus_sq)
        .collect();
    let consensus_avg =
        (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64);

    let params = setup.params.as_ref();
    Summary {
        config_hash: config_hash.to_string(),
        nodes: setup.system.nodes(),
        d: setup.system.d(),
        replicas: cfg.replicas,
        iterations: cfg.iterations,
        alpha0: cfg.alpha0,
        beta0: cfg.beta0,
        scale: setup.scale,
        sigma_w: setup.w.sigma2(),
        sigma_v: setup.v.sigma2(),
        sigma: setup.sigma,
        delta: params.map(|p| p.delta),
        kstar: params.map(|p| p.kstar),
        constant_d: params.map(|p| p.d),
        r: setup.system.r(),
        noise_bound: setup.noise_bound,
        sigma_power_threshold: sigma_power_threshold(setup.sigma).ok(),
        x_star: setup.solution.x_star.as_slice().to_vec(),
        y_star: setup.solution.y_star.as_slice().to_vec(),
        audit,
        fits,
        lemma2,
        theorem1_dominance,
        final_values: mean.last().map(|r| FinalValues {
            k: r.k,
            consensus_sq: r.consensus_sq,
            mse_weighted: r.mse_weighted,
            mse_weighted_se: r.mse_weighted_se,
            xbar_err: r.xbar_err,
            ybar_err: r.ybar_err,
        }),
        consensus_avg,
        warnings,
        defaults_applied: loaded.defaults_applied.clone(),
        curves,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(k: u64, mse: f64) -> Row {
        Row {
            k,
            alpha: 0.5,
            beta: 0.1,
            v: 1.0,
            consensus_sq: mse,
            mse_weighted: mse,
            xbar_err: 1.0,
            ybar_err: 2.0,
        }
    }

    #[test]
    fn mean_rows_average_and_spread() {
        let a = vec![row(0, 1.0), row(1, 3.0)];
        let b = vec![row(0, 3.0), row(1, 5.0)];
        let m = mean_rows(&[a, b]);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].mse_weighted, 2.0);
        assert_eq!(m[1].consensus_sq_max, 5.0);
        assert!((m[0].mse_weighted_se - 1.0).abs() < 1e-15);
        assert!((m[0].central_err - (2.0 + 0.2)).abs() < 1e-15);
        assert!(mean_rows(&[]).is_empty());
    }
}
