//! The distributed two-time-scale iteration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{weighted_mse, AuditAccumulator, AuditReport, BoundParams};
use crate::network::WeightMatrix;
use crate::noise::NoiseProcess;
use crate::numerics::{DenseMatrix, DenseVector, NumericsError};
use crate::problem::{BlockSystem, Solution};

/// Iterates whose magnitude exceeds this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgorithmError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("the matrix form needs a homogeneous system")]
    Heterogeneous,
    #[error("iterates diverged at k = {k}")]
    Diverged { k: usize },
    #[error("projection radius {radius} does not exceed the solution norm {required}")]
    RadiusTooSmall { radius: f64, required: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `α_k = α0 / (k+1)^{2/3}` and `β_k = β0 / (k+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    alpha0: f64,
    beta0: f64,
}

impl StepSchedule {
    /// Both initial steps must be positive and finite. `β0 > α0` is accepted;
    /// see [`StepSchedule::is_ordered`].
    pub fn new(alpha0: f64, beta0: f64) -> Result<Self, AlgorithmError> {
        for (name, v) in [("alpha0", alpha0), ("beta0", beta0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(AlgorithmError::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(Self { alpha0, beta0 })
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn beta0(&self) -> f64 {
        self.beta0
    }

    /// `β0 ≤ α0`, which keeps `γ_k ≤ 1`.
    pub fn is_ordered(&self) -> bool {
        self.beta0 <= self.alpha0
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha0 / ((k + 1) as f64).powf(2.0 / 3.0)
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta0 / (k + 1) as f64
    }

    /// `γ_k = β_k / α_k`.
    pub fn gamma(&self, k: usize) -> f64 {
        self.beta(k) / self.alpha(k)
    }
}

pub fn step_sizes(s: &StepSchedule, k: usize) -> (f64, f64) {
    (s.alpha(k), s.beta(k))
}

/// Row `i` of `x` and `y` is node `i`'s iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateState {
    pub k: usize,
    pub x: DenseMatrix,
    pub y: DenseMatrix,
}

impl IterateState {
    pub fn zeros(nodes: usize, d: usize) -> Self {
        Self {
            k: 0,
            x: DenseMatrix::zeros(nodes, d),
            y: DenseMatrix::zeros(nodes, d),
        }
    }

    pub fn new(k: usize, x: DenseMatrix, y: DenseMatrix) -> Result<Self, AlgorithmError> {
        if x.shape() != y.shape() {
            return Err(AlgorithmError::Dimension(format!(
                "x is {:?} but y is {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Self { k, x, y })
    }

    pub fn nodes(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn xbar(&self) -> DenseVector {
        self.x.row_mean()
    }

    pub fn ybar(&self) -> DenseVector {
        self.y.row_mean()
    }

    fn max_abs(&self) -> f64 {
        self.x.max_abs().max(self.y.max_abs())
    }

    fn is_finite(&self) -> bool {
        self.x.all_finite() && self.y.all_finite()
    }
}

fn check_dims(
    state: &IterateState,
    sys: &BlockSystem,
    w: &WeightMatrix,
    v: &WeightMatrix,
) -> Result<(), AlgorithmError> {
    let (n, d) = (sys.nodes(), sys.d());
    if state.x.shape() != (n, d) || state.y.shape() != (n, d) {
        return Err(AlgorithmError::Dimension(format!(
            "iterates are {:?}/{:?}, system needs ({n}, {d})",
            state.x.shape(),
            state.y.shape()
        )));
    }
    if w.node_count() != n || v.node_count() != n {
        return Err(AlgorithmError::Dimension(format!(
            "weight matrices have {} and {} nodes, system has {n}",
            w.node_count(),
            v.node_count()
        )));
    }
    Ok(())
}

fn check_noise(
    xi: &DenseMatrix,
    psi: &DenseMatrix,
    n: usize,
    d: usize,
) -> Result<(), AlgorithmError> {
    if xi.shape() != (n, d) || psi.shape() != (n, d) {
        return Err(AlgorithmError::Dimension(format!(
            "noise is {:?}/{:?}, expected ({n}, {d})",
            xi.shape(),
            psi.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Half {
    X,
    Y,
}

/// One half of the update for every node: the `x` half mixes `X` with `W`
/// and uses `(A11, A12, b1)`, the `y` half mixes `Y` with `V` and uses
/// `(A21, A22, b2)`. Both drifts act on the node's current `(xⁱ, yⁱ)`.
fn half_step(
    half: Half,
    state: &IterateState,
    sys: &BlockSystem,
    mix: &DenseMatrix,
    noise: &DenseMatrix,
    step: f64,
    out: &mut DenseMatrix,
) {
    let (n, d) = state.x.shape();
    let (z, rhs) = match half {
        Half::X => (&state.x, sys.b1()),
        Half::Y => (&state.y, sys.b2()),
    };
    for i in 0..n {
        let nb = sys.node_blocks(i);
        let (a, b) = match half {
            Half::X => (nb[0], nb[1]),
            Half::Y => (nb[2], nb[3]),
        };
        let xi = state.x.row(i);
        let yi = state.y.row(i);
        let mrow = mix.row(i);
        let bi = rhs[i].as_slice();
        let ei = noise.row(i);
        let orow = out.row_mut(i);
        for c in 0..d {
            let mut mixed = 0.0;
            for (j, &m) in mrow.iter().enumerate() {
                if m != 0.0 {
                    mixed += m * z[(j, c)];
                }
            }
            let arow = a.row(c);
            let brow = b.row(c);
            let mut drift = 0.0;
            for t in 0..d {
                drift += arow[t] * xi[t] + brow[t] * yi[t];
            }
            orow[c] = mixed - step * (drift - bi[c] + ei[c]);
        }
    }
}

/// Per-node update of `state` into `out` without allocating.
#[allow(clippy::too_many_arguments)]
pub(crate) fn step_into(
    state: &IterateState,
    sys: &BlockSystem,
    w: &WeightMatrix,
    v: &WeightMatrix,
    s: &StepSchedule,
    xi: &DenseMatrix,
    psi: &DenseMatrix,
    out: &mut IterateState,
) {
    let (alpha, beta) = step_sizes(s, state.k);
    half_step(Half::X, state, sys, w.matrix(), xi, alpha, &mut out.x);
    half_step(Half::Y, state, sys, v.matrix(), psi, beta, &mut out.y);
    out.k = state.k + 1;
}

/// Per-node update with explicit noise pairs `(ξⁱ, ψⁱ)`.
pub fn step(
    state: &IterateState,
    sys: &BlockSystem,
    w: &WeightMatrix,
    v: &WeightMatrix,
    s: &StepSchedule,
    noise: &[(DenseVector, DenseVector)],
) -> Result<IterateState, AlgorithmError> {
    check_dims(state, sys, w, v)?;
    let (n, d) = (sys.nodes(), sys.d());
    if noise.len() != n || noise.iter().any(|(a, b)| a.dim() != d || b.dim() != d) {
        return Err(AlgorithmError::Dimension(format!(
            "expected {n} noise pairs of dimension {d}"
        )));
    }
    let xi = DenseMatrix::from_fn(n, d, |i, j| noise[i].0[j]);
    let psi = DenseMatrix::from_fn(n, d, |i, j| noise[i].1[j]);
    let mut out = IterateState::zeros(n, d);
    step_into(state, sys, w, v, s, &xi, &psi, &mut out);
    Ok(out)
}

/// Matrix form: `X' = WX − α(X A11ᵀ + Y A12ᵀ − B1 + Ξ)`,
/// `Y' = VY − β(X A21ᵀ + Y A22ᵀ − B2 + Ψ)`.
pub fn step_matrix(
    state: &IterateState,
    sys: &BlockSystem,
    w: &WeightMatrix,
    v: &WeightMatrix,
    s: &StepSchedule,
    xi: &DenseMatrix,
    psi: &DenseMatrix,
) -> Result<IterateState, AlgorithmError> {
    if sys.is_heterogeneous() {
        return Err(AlgorithmError::Heterogeneous);
    }
    check_dims(state, sys, w, v)?;
    check_noise(xi, psi, sys.nodes(), sys.d())?;
    let (alpha, beta) = step_sizes(s, state.k);
    let (x, y) = (&state.x, &state.y);
    let drift_x = x
        .matmul_transposed(sys.a11())?
        .add(&y.matmul_transposed(sys.a12())?)?
        .sub(&sys.b1_matrix())?
        .add(xi)?;
    let drift_y = x
        .matmul_transposed(sys.a21())?
        .add(&y.matmul_transposed(sys.a22())?)?
        .sub(&sys.b2_matrix())?
        .add(psi)?;
    Ok(IterateState {
        k: state.k + 1,
        x: w.matrix().matmul(x)?.sub(&drift_x.scale(alpha))?,
        y: v.matrix().matmul(y)?.sub(&drift_y.scale(beta))?,
    })
}

/// Centralized recursion of the node averages with node-mean noise.
#[allow(clippy::too_many_arguments)]
pub fn averaged_step(
    xbar: &DenseVector,
    ybar: &DenseVector,
    sys: &BlockSystem,
    s: &StepSchedule,
    k: usize,
    xi_bar: &DenseVector,
    psi_bar: &DenseVector,
) -> Result<(DenseVector, DenseVector), AlgorithmError> {
    let (alpha, beta) = step_sizes(s, k);
    let dx = sys
        .a11()
        .mul_vec(xbar)?
        .add(&sys.a12().mul_vec(ybar)?)
        .sub(&sys.b1_mean())
        .add(xi_bar);
    let dy = sys
        .a21()
        .mul_vec(xbar)?
        .add(&sys.a22().mul_vec(ybar)?)
        .sub(&sys.b2_mean())
        .add(psi_bar);
    Ok((xbar.sub(&dx.scale(alpha)), ybar.sub(&dy.scale(beta))))
}

/// Largest `‖x*‖`, `‖y*‖`; a projection ball must be strictly larger.
pub fn check_projection_radius(sol: &Solution, radius: f64) -> Result<(), AlgorithmError> {
    let required = sol.x_star.norm().max(sol.y_star.norm());
    if !(radius > required) {
        return Err(AlgorithmError::RadiusTooSmall { radius, required });
    }
    Ok(())
}

fn project_rows(m: &mut DenseMatrix, radius: f64) {
    if radius.is_infinite() {
        return;
    }
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > radius {
            let c = radius / norm;
            row.iter_mut().for_each(|v| *v *= c);
        }
    }
}

/// Per-node update followed by projecting every node's `x` and `y` onto the
/// origin-centred ball of the given radius. `f64::INFINITY` disables it.
pub fn projected_step(
    state: &IterateState,
    sys: &BlockSystem,
    w: &WeightMatrix,
    v: &WeightMatrix,
    s: &StepSchedule,
    noise: &[(DenseVector, DenseVector)],
    radius: f64,
) -> Result<IterateState, AlgorithmError> {
    if !(radius > 0.0) {
        return Err(AlgorithmError::InvalidParameter(format!(
            "projection radius must be positive, got {radius}"
        )));
    }
    let mut out = step(state, sys, w, v, s, noise)?;
    project_rows(&mut out.x, radius);
    project_rows(&mut out.y, radius);
    Ok(out)
}

/// The scalar consensus quantities of one iterate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub v: f64,
    pub consensus_sq: f64,
    pub xhat_norm: f64,
    pub yhat_norm: f64,
}

impl StepMetrics {
    pub fn of(state: &IterateState, s: &StepSchedule) -> Self {
        let (alpha, beta) = step_sizes(s, state.k);
        let gamma = beta / alpha;
        let xhat_norm = state.x.centered_frobenius_norm();
        let yhat_norm = state.y.centered_frobenius_norm();
        Self {
            k: state.k,
            alpha,
            beta,
            v: yhat_norm + gamma * xhat_norm,
            consensus_sq: yhat_norm * yhat_norm + gamma * xhat_norm * xhat_norm,
            xhat_norm,
            yhat_norm,
        }
    }
}

/// One recorded point of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    /// `V_k = ‖Ŷ‖_F + γ_k ‖X̂‖_F`.
    pub v: f64,
    /// `Σᵢ (‖yⁱ − ȳ‖² + γ_k ‖xⁱ − x̄‖²)`.
    pub consensus_sq: f64,
    /// `(1/N) Σᵢ (‖yⁱ − y*‖² + γ_k ‖xⁱ − x*‖²)`.
    pub mse_weighted: f64,
    /// `‖x̄ − x*‖²`.
    pub xbar_err: f64,
    /// `‖ȳ − y*‖²`.
    pub ybar_err: f64,
    pub xhat_norm: f64,
    pub yhat_norm: f64,
    pub xbar: Vec<f64>,
    pub ybar: Vec<f64>,
}

impl TrajectoryRecord {
    pub fn of(state: &IterateState, s: &StepSchedule, sol: &Solution) -> Self {
        Self::with_metrics(StepMetrics::of(state, s), state, s, sol)
    }

    fn with_metrics(
        m: StepMetrics,
        state: &IterateState,
        s: &StepSchedule,
        sol: &Solution,
    ) -> Self {
        let xbar = state.xbar();
        let ybar = state.ybar();
        Self {
            k: m.k,
            alpha: m.alpha,
            beta: m.beta,
            v: m.v,
            consensus_sq: m.consensus_sq,
            mse_weighted: weighted_mse(state, sol, s),
            xbar_err: sol.x_star.distance_sq(xbar.as_slice()),
            ybar_err: sol.y_star.distance_sq(ybar.as_slice()),
            xhat_norm: m.xhat_norm,
            yhat_norm: m.yhat_norm,
            xbar: xbar.into_vec(),
            ybar: ybar.into_vec(),
        }
    }

    pub fn metrics(&self) -> StepMetrics {
        StepMetrics {
            k: self.k,
            alpha: self.alpha,
            beta: self.beta,
            v: self.v,
            consensus_sq: self.consensus_sq,
            xhat_norm: self.xhat_norm,
            yhat_norm: self.yhat_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<TrajectoryRecord>,
}

impl Trajectory {
    pub fn ks(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.k).collect()
    }

    pub fn last(&self) -> Option<&TrajectoryRecord> {
        self.records.last()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Total iterations `K`.
    pub iterations: usize,
    /// Record every this many iterations, plus `k = 0` and `k = K`.
    pub record_every: usize,
    /// Starting point; zero when absent.
    pub initial: Option<IterateState>,
    /// Ball radius for the projected variant.
    pub projection_radius: Option<f64>,
    /// When set, every step (not only recorded ones) is audited.
    pub audit: Option<BoundParams>,
}

impl RunOptions {
    pub fn new(iterations: usize, record_every: usize) -> Self {
        Self {
            iterations,
            record_every,
            initial: None,
            projection_radius: None,
            audit: None,
        }
    }
}

/// Outcome of [`run`]: the recorded metrics and the final iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub final_state: IterateState,
    pub audit: Option<AuditReport>,
}

/// Runs `K` iterations from zero (or the supplied start), drawing fresh
/// noise from `noise` every iteration.
#[allow(clippy::too_many_arguments)]
pub fn run(
    sys: &BlockSystem,
    w: &WeightMatrix,
    v: &WeightMatrix,
    s: &StepSchedule,
    noise: &mut dyn NoiseProcess,
    solution: &Solution,
    opts: &RunOptions,
) -> Result<RunOutput, AlgorithmError> {
    if opts.record_every == 0 {
        return Err(AlgorithmError::InvalidParameter(
            "record_every must be at least 1".into(),
        ));
    }
    let (n, d) = (sys.nodes(), sys.d());
    let mut state = match &opts.initial {
        Some(init) => init.clone(),
        None => IterateState::zeros(n, d),
    };
    check_dims(&state, sys, w, v)?;
    if let Some(r) = opts.projection_radius {
        check_projection_radius(solution, r)?;
    }
    let start = state.k;
    let end = start + opts.iterations;
    let mut next = state.clone();
    let mut xi = DenseMatrix::zeros(n, d);
    let mut psi = DenseMatrix::zeros(n, d);
    let mut audit = opts.audit.clone().map(AuditAccumulator::new);
    let first = StepMetrics::of(&state, s);
    if let Some(a) = audit.as_mut() {
        a.observe(first);
    }
    let mut records = vec![TrajectoryRecord::with_metrics(first, &state, s, solution)];
    while state.k < end {
        noise.draw(state.k, &state.x, &state.y, &mut xi, &mut psi);
        step_into(&state, sys, w, v, s, &xi, &psi, &mut next);
        if let Some(r) = opts.projection_radius {
            project_rows(&mut next.x, r);
            project_rows(&mut next.y, r);
        }
        std::mem::swap(&mut state, &mut next);
        if !state.is_finite() || state.max_abs() > DIVERGENCE_LIMIT {
            return Err(AlgorithmError::Diverged { k: state.k });
        }
        let record = (state.k - start) % opts.record_every == 0 || state.k == end;
        if record || audit.is_some() {
            let m = StepMetrics::of(&state, s);
            if let Some(a) = audit.as_mut() {
                a.observe(m);
            }
            if record {
                records.push(TrajectoryRecord::with_metrics(m, &state, s, solution));
            }
        }
    }
    Ok(RunOutput {
        trajectory: Trajectory { records },
        final_state: state,
        audit: audit.map(AuditAccumulator::finish),
    })
}
