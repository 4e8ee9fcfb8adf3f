//! Constants and bounds of the finite-time analysis, empirical error
//! measures, rate fits and the per-step inequality audit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::algorithm::{IterateState, StepMetrics, StepSchedule, Trajectory, TrajectoryRecord};
use crate::problem::Solution;

/// Absolute slack on every audited inequality.
pub const AUDIT_SLACK: f64 = 1e-9;
/// Minimum number of points for a rate fit.
pub const MIN_FIT_POINTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("need at least {needed} points in the fit window, found {found}")]
    TooFewPoints { needed: usize, found: usize },
    #[error("metric is not positive at k = {k}")]
    NonPositive { k: f64 },
}

/// `⌈(α0 / (δ − σ))^{3/2}⌉`, at least 1.
pub fn kstar(alpha0: f64, delta: f64, sigma: f64) -> Result<u64, AnalysisError> {
    check_delta(delta, sigma)?;
    if !(alpha0 > 0.0 && alpha0.is_finite()) {
        return Err(AnalysisError::InvalidParameter(format!(
            "alpha0 must be positive, got {alpha0}"
        )));
    }
    let v = (alpha0 / (delta - sigma)).powf(1.5);
    // Absorb rounding so exact integers are not pushed to the next one.
    let k = (v * (1.0 - 1e-12)).ceil();
    if !k.is_finite() || k > u64::MAX as f64 {
        return Err(AnalysisError::InvalidParameter(format!(
            "K* = {v} is not representable"
        )));
    }
    Ok((k as u64).max(1))
}

fn check_delta(delta: f64, sigma: f64) -> Result<(), AnalysisError> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(AnalysisError::InvalidParameter(format!(
            "sigma must lie in [0, 1), got {sigma}"
        )));
    }
    if !(delta > sigma && delta < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "delta must lie in (sigma, 1) = ({sigma}, 1), got {delta}"
        )));
    }
    Ok(())
}

/// `𝒟 = 2√N (R + C)(6α0 + 1) K*^{1/3} / (1 − δ)`.
pub fn constant_d(
    n: usize,
    r: f64,
    c: f64,
    alpha0: f64,
    delta: f64,
    kstar: u64,
) -> Result<f64, AnalysisError> {
    if !(delta < 1.0) {
        return Err(AnalysisError::InvalidParameter(format!(
            "delta must be below 1, got {delta}"
        )));
    }
    if kstar == 0 {
        return Err(AnalysisError::InvalidParameter(
            "K* must be at least 1".into(),
        ));
    }
    Ok(
        2.0 * (n as f64).sqrt() * (r + c) * (6.0 * alpha0 + 1.0) * (kstar as f64).cbrt()
            / (1.0 - delta),
    )
}

/// Everything the bounds depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    pub sigma_w: f64,
    pub sigma_v: f64,
    /// `max(σ_W, σ_V)`.
    pub sigma: f64,
    pub delta: f64,
    pub kstar: u64,
    /// `𝒟`.
    pub d: f64,
    pub r: f64,
    pub c: f64,
    pub n: usize,
    pub alpha0: f64,
    pub beta0: f64,
    pub d0: f64,
    pub d1: f64,
}

impl BoundParams {
    /// Computes `σ`, `K*` and `𝒟`. `delta` defaults to `(1 + σ)/2`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        sigma_w: f64,
        sigma_v: f64,
        delta: Option<f64>,
        n: usize,
        r: f64,
        c: f64,
        schedule: &StepSchedule,
        d0: f64,
        d1: f64,
    ) -> Result<Self, AnalysisError> {
        let sigma = sigma_w.max(sigma_v);
        let delta = delta.unwrap_or_else(|| default_delta(sigma));
        let kstar = kstar(schedule.alpha0(), delta, sigma)?;
        let d = constant_d(n, r, c, schedule.alpha0(), delta, kstar)?;
        if !(d0 >= 0.0 && d1 >= 0.0) {
            return Err(AnalysisError::InvalidParameter(format!(
                "D0 and D1 must be nonnegative, got {d0} and {d1}"
            )));
        }
        Ok(Self {
            sigma_w,
            sigma_v,
            sigma,
            delta,
            kstar,
            d,
            r,
            c,
            n,
            alpha0: schedule.alpha0(),
            beta0: schedule.beta0(),
            d0,
            d1,
        })
    }
}

/// Midpoint of `(σ, 1)`.
pub fn default_delta(sigma: f64) -> f64 {
    (1.0 + sigma) / 2.0
}

/// `‖Y − 𝟙ȳᵀ‖_F + γ_k ‖X − 𝟙x̄ᵀ‖_F`.
pub fn consensus_residual(state: &IterateState, s: &StepSchedule) -> f64 {
    state.y.centered_frobenius_norm() + s.gamma(state.k) * state.x.centered_frobenius_norm()
}

/// `Σᵢ (‖yⁱ − ȳ‖² + γ_k ‖xⁱ − x̄‖²)`.
pub fn consensus_sq(state: &IterateState, s: &StepSchedule) -> f64 {
    let fx = state.x.centered_frobenius_norm();
    let fy = state.y.centered_frobenius_norm();
    fy * fy + s.gamma(state.k) * fx * fx
}

/// `(1/N) Σᵢ (‖yⁱ − y*‖² + γ_k ‖xⁱ − x*‖²)`.
pub fn weighted_mse(state: &IterateState, sol: &Solution, s: &StepSchedule) -> f64 {
    let gamma = s.gamma(state.k);
    let n = state.nodes();
    let total: f64 = (0..n)
        .map(|i| {
            sol.y_star.distance_sq(state.y.row(i)) + gamma * sol.x_star.distance_sq(state.x.row(i))
        })
        .sum();
    total / n as f64
}

/// The two terms of the consensus bound, each evaluated in log space.
/// A term that overflows is `+∞`.
pub fn lemma1_terms(k: u64, p: &BoundParams) -> (f64, f64) {
    if p.d == 0.0 {
        return (0.0, 0.0);
    }
    let kf = k as f64;
    let common =
        8f64.ln() + 2.0 * p.d.ln() + p.beta0.ln() + p.alpha0.ln() - 2.0 * (1.0 - p.sigma).ln();
    let ln_kstar = (p.kstar as f64).ln();
    let first = if ln_kstar == 0.0 || p.sigma == 0.0 {
        0.0
    } else {
        (common + 2.0 * ln_kstar.ln()
            - 2.0 * p.kstar as f64 * p.sigma.ln()
            - (2.0 / 3.0) * (kf + 1.0).ln())
        .exp()
    };
    let second = (common - (5.0 / 3.0) * (kf + 2.0).ln()).exp();
    (first, second)
}

/// Pathwise bound on `Σᵢ (‖yⁱ − ȳ‖² + γ_k ‖xⁱ − x̄‖²)`.
pub fn lemma1_bound(k: u64, p: &BoundParams) -> f64 {
    let (a, b) = lemma1_terms(k, p);
    a + b
}

/// `𝒟0 / (k+1)^{2/3} + 𝒟1 ln(k+1) / (k+1)`.
pub fn lemma2_bound(k: u64, d0: f64, d1: f64) -> f64 {
    let kp = (k + 1) as f64;
    let second = if d1 == 0.0 { 0.0 } else { d1 * kp.ln() / kp };
    d0 / kp.powf(2.0 / 3.0) + second
}

/// Bound on the weighted mean-square error: the consensus terms scaled by
/// `2/N` plus twice the centralized error bound.
pub fn theorem1_bound(k: u64, p: &BoundParams) -> f64 {
    2.0 / p.n as f64 * lemma1_bound(k, p) + 2.0 * lemma2_bound(k, p.d0, p.d1)
}

/// Smallest `(𝒟0, 𝒟1)` found on a grid for which the centralized bound
/// dominates every `(k, value)` point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lemma2Fit {
    pub d0: f64,
    pub d1: f64,
}

/// For each `𝒟1` on a geometric grid the least dominating `𝒟0` is exact;
/// the pair with the smallest `𝒟0 + 𝒟1` wins.
pub fn fit_lemma2_constants(points: &[(u64, f64)]) -> Lemma2Fit {
    let d0_for = |d1: f64| {
        points
            .iter()
            .map(|&(k, v)| {
                let kp = (k + 1) as f64;
                (v - d1 * kp.ln() / kp) * kp.powf(2.0 / 3.0)
            })
            .fold(0.0, f64::max)
    };
    let top = points.iter().map(|p| p.1).fold(0.0, f64::max).max(1e-300);
    let mut best = Lemma2Fit {
        d0: d0_for(0.0),
        d1: 0.0,
    };
    for e in -40..=40 {
        let d1 = top * 10f64.powf(e as f64 / 8.0);
        let d0 = d0_for(d1);
        if d0 + d1 < best.d0 + best.d1 {
            best = Lemma2Fit { d0, d1 };
        }
    }
    best
}

/// A per-record quantity that can be fitted or averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    V,
    ConsensusSq,
    MseWeighted,
    XbarErr,
    YbarErr,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::V,
        Metric::ConsensusSq,
        Metric::MseWeighted,
        Metric::XbarErr,
        Metric::YbarErr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::V => "V",
            Metric::ConsensusSq => "consensus_sq",
            Metric::MseWeighted => "mse_weighted",
            Metric::XbarErr => "xbar_err",
            Metric::YbarErr => "ybar_err",
        }
    }

    pub fn value(self, r: &TrajectoryRecord) -> f64 {
        match self {
            Metric::V => r.v,
            Metric::ConsensusSq => r.consensus_sq,
            Metric::MseWeighted => r.mse_weighted,
            Metric::XbarErr => r.xbar_err,
            Metric::YbarErr => r.ybar_err,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AnalysisError::InvalidParameter(format!("unknown metric {s:?}")))
    }
}

/// Least-squares line through `(ln k, ln metric)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub window: (u64, u64),
    pub samples: usize,
}

/// Fits `metric ≈ e^{intercept} k^{exponent}` over records with
/// `k ∈ [window.0, window.1]`.
pub fn fit_rate_exponent(
    traj: &Trajectory,
    metric: Metric,
    window: (u64, u64),
) -> Result<RateFit, AnalysisError> {
    let points: Vec<(f64, f64)> = traj
        .records
        .iter()
        .map(|r| (r.k as f64, metric.value(r)))
        .collect();
    fit_power_law(&points, window)
}

/// Power-law fit on raw `(k, value)` pairs; `k = 0` is never in a window
/// because the logarithm is undefined there.
pub fn fit_power_law(points: &[(f64, f64)], window: (u64, u64)) -> Result<RateFit, AnalysisError> {
    let lo = (window.0 as f64).max(1.0);
    let hi = window.1 as f64;
    let inside: Vec<(f64, f64)> = points
        .iter()
        .copied()
        .filter(|&(k, _)| k >= lo && k <= hi)
        .collect();
    if inside.len() < MIN_FIT_POINTS {
        return Err(AnalysisError::TooFewPoints {
            needed: MIN_FIT_POINTS,
            found: inside.len(),
        });
    }
    if let Some(&(k, _)) = inside.iter().find(|&&(_, v)| !(v > 0.0)) {
        return Err(AnalysisError::NonPositive { k });
    }
    let n = inside.len() as f64;
    let xs: Vec<f64> = inside.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = inside.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(AnalysisError::InvalidParameter(
            "all fit points share one k".into(),
        ));
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let r_squared = if syy == 0.0 {
        1.0
    } else {
        (sxy * sxy / (sxx * syy)).clamp(0.0, 1.0)
    };
    Ok(RateFit {
        exponent,
        intercept,
        r_squared,
        window,
        samples: inside.len(),
    })
}

/// Violation counts of the per-step inequalities along one trajectory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AuditReport {
    /// Consecutive record pairs `(k, k+1)` examined.
    pub steps_checked: usize,
    /// Record pairs that were not consecutive and so were skipped.
    pub steps_skipped: usize,
    /// `‖X̂_{k+1}‖ ≤ (σ_W + α_k)‖X̂_k‖ + α_k‖Ŷ_k‖ + √N(R+C)α_k`.
    pub eq1_violations: usize,
    /// `‖Ŷ_{k+1}‖ ≤ (σ_V + β_k)‖Ŷ_k‖ + β_k‖X̂_k‖ + √N(R+C)β_k`.
    pub eq2_violations: usize,
    /// Steps with `k ≥ K*` checked against `V_{k+1} ≤ σV_k + 𝒟β_k`.
    pub v_recursion_checked: usize,
    pub v_recursion_violations: usize,
    /// Consensus bound checks on records with `k < K*`.
    pub lemma1_checked_before_kstar: usize,
    pub lemma1_violations_before_kstar: usize,
    /// Consensus bound checks on records with `k ≥ K*`.
    pub lemma1_checked_after_kstar: usize,
    pub lemma1_violations_after_kstar: usize,
    /// Records where the consensus bound overflowed.
    pub lemma1_infinite: usize,
    pub first_violation: Option<String>,
}

impl AuditReport {
    pub fn total_violations(&self) -> usize {
        self.eq1_violations
            + self.eq2_violations
            + self.v_recursion_violations
            + self.lemma1_violations_before_kstar
            + self.lemma1_violations_after_kstar
    }

    fn note(&mut self, msg: impl FnOnce() -> String) {
        if self.first_violation.is_none() {
            self.first_violation = Some(msg());
        }
    }
}

/// Streaming form of [`proof_inequality_audit`]: feed the metrics of every
/// recorded iterate in increasing `k`.
#[derive(Debug, Clone)]
pub struct AuditAccumulator {
    params: BoundParams,
    offset: f64,
    prev: Option<StepMetrics>,
    report: AuditReport,
}

impl AuditAccumulator {
    pub fn new(params: BoundParams) -> Self {
        let offset = (params.n as f64).sqrt() * (params.r + params.c);
        Self {
            params,
            offset,
            prev: None,
            report: AuditReport::default(),
        }
    }

    pub fn observe(&mut self, m: StepMetrics) {
        self.check_bound(&m);
        if let Some(a) = self.prev {
            self.check_step(&a, &m);
        }
        self.prev = Some(m);
    }

    pub fn finish(self) -> AuditReport {
        self.report
    }

    fn check_bound(&mut self, m: &StepMetrics) {
        let rep = &mut self.report;
        let bound = lemma1_bound(m.k as u64, &self.params);
        if bound.is_infinite() {
            rep.lemma1_infinite += 1;
            return;
        }
        let ok = m.consensus_sq <= bound + AUDIT_SLACK;
        if (m.k as u64) < self.params.kstar {
            rep.lemma1_checked_before_kstar += 1;
            rep.lemma1_violations_before_kstar += usize::from(!ok);
        } else {
            rep.lemma1_checked_after_kstar += 1;
            rep.lemma1_violations_after_kstar += usize::from(!ok);
        }
        if !ok {
            rep.note(|| {
                format!(
                    "consensus bound at k = {}: {} > {bound}",
                    m.k, m.consensus_sq
                )
            });
        }
    }

    fn check_step(&mut self, a: &StepMetrics, b: &StepMetrics) {
        let p = &self.params;
        let rep = &mut self.report;
        if b.k != a.k + 1 {
            rep.steps_skipped += 1;
            return;
        }
        rep.steps_checked += 1;
        let rhs1 =
            (p.sigma_w + a.alpha) * a.xhat_norm + a.alpha * a.yhat_norm + self.offset * a.alpha;
        if b.xhat_norm > rhs1 + AUDIT_SLACK {
            rep.eq1_violations += 1;
            rep.note(|| format!("x consensus step at k = {}: {} > {rhs1}", a.k, b.xhat_norm));
        }
        let rhs2 = (p.sigma_v + a.beta) * a.yhat_norm + a.beta * a.xhat_norm + self.offset * a.beta;
        if b.yhat_norm > rhs2 + AUDIT_SLACK {
            rep.eq2_violations += 1;
            rep.note(|| format!("y consensus step at k = {}: {} > {rhs2}", a.k, b.yhat_norm));
        }
        if a.k as u64 >= p.kstar {
            rep.v_recursion_checked += 1;
            let rhs = p.sigma * a.v + p.d * a.beta;
            if b.v > rhs + AUDIT_SLACK {
                rep.v_recursion_violations += 1;
                rep.note(|| format!("V recursion at k = {}: {} > {rhs}", a.k, b.v));
            }
        }
    }
}

impl AuditReport {
    /// Adds the counts of `other`; the first violation of `self` is kept.
    pub fn merge(&mut self, other: &AuditReport) {
        self.steps_checked += other.steps_checked;
        self.steps_skipped += other.steps_skipped;
        self.eq1_violations += other.eq1_violations;
        self.eq2_violations += other.eq2_violations;
        self.v_recursion_checked += other.v_recursion_checked;
        self.v_recursion_violations += other.v_recursion_violations;
        self.lemma1_checked_before_kstar += other.lemma1_checked_before_kstar;
        self.lemma1_violations_before_kstar += other.lemma1_violations_before_kstar;
        self.lemma1_checked_after_kstar += other.lemma1_checked_after_kstar;
        self.lemma1_violations_after_kstar += other.lemma1_violations_after_kstar;
        self.lemma1_infinite += other.lemma1_infinite;
        if self.first_violation.is_none() {
            self.first_violation = other.first_violation.clone();
        }
    }
}

/// Checks the deterministic consensus inequalities between consecutive
/// records and the consensus bound at every record. Pairs of records that
/// are not one step apart are skipped.
pub fn proof_inequality_audit(traj: &Trajectory, p: &BoundParams) -> AuditReport {
    let mut acc = AuditAccumulator::new(p.clone());
    for rec in &traj.records {
        acc.observe(rec.metrics());
    }
    acc.finish()
}

/// Smallest `k0 ≥ 1` with `σ^k ≤ 1/(k+1)` for every `k ≥ k0`.
///
/// `k ln σ + ln(k+1)` is concave in `k`, so the violating `k` form one
/// interval that starts no later than the maximiser `−1/ln σ − 1`.
pub fn sigma_power_threshold(sigma: f64) -> Result<u64, AnalysisError> {
    if !(0.0..1.0).contains(&sigma) {
        return Err(AnalysisError::InvalidParameter(format!(
            "sigma must lie in [0, 1), got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(1);
    }
    let holds = |k: u64| sigma.powf(k as f64) <= 1.0 / (k as f64 + 1.0);
    let peak = (-1.0 / sigma.ln() - 1.0).max(1.0);
    let (lo, hi) = (peak.floor() as u64, peak.ceil() as u64);
    let mut k = if !holds(lo) {
        lo
    } else if !holds(hi) {
        hi
    } else {
        return Ok(1);
    };
    while !holds(k) {
        k += 1;
    }
    Ok(k)
}
