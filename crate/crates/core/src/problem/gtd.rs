//! Distributed GTD policy evaluation as an instance of the block system.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{exact_solution, BlockSystem, ProblemError};
use crate::numerics::{solve_linear, symmetric_eigen, DenseMatrix, DenseVector, NumericsError};

const ROW_SUM_TOL: f64 = 1e-10;
const POWER_TOL: f64 = 1e-12;
const POWER_CAP: usize = 1_000_000;
const RANK_RTOL: f64 = 1e-10;

/// A finite Markov chain under a fixed policy, with one reward table per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mdp {
    /// Row-stochastic `S×S` transition matrix.
    pub transitions: DenseMatrix,
    /// `rewards[i][s]` is agent `i`'s reward in state `s`.
    pub rewards: Vec<Vec<f64>>,
}

/// Stationary distribution of an irreducible row-stochastic matrix.
pub fn stationary_distribution(p: &DenseMatrix) -> Result<Vec<f64>, ProblemError> {
    check_stochastic(p)?;
    if !is_irreducible(p) {
        return Err(ProblemError::ReducibleChain);
    }
    let s = p.rows();
    // (Pᵀ − I) π = 0 with the last equation replaced by Σ π = 1.
    let mut m = DenseMatrix::from_fn(s, s, |i, j| p[(j, i)] - if i == j { 1.0 } else { 0.0 });
    for j in 0..s {
        m[(s - 1, j)] = 1.0;
    }
    let mut rhs = DenseVector::zeros(s);
    rhs[s - 1] = 1.0;
    let mut pi = match solve_linear(&m, &rhs) {
        Ok(v) => v.into_vec(),
        Err(NumericsError::Singular { .. }) => power_stationary(p)?,
        Err(e) => return Err(e.into()),
    };
    pi.iter_mut().for_each(|v| *v = v.max(0.0));
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|v| *v /= total);
    Ok(pi)
}

fn power_stationary(p: &DenseMatrix) -> Result<Vec<f64>, ProblemError> {
    let s = p.rows();
    let mut pi = vec![1.0 / s as f64; s];
    // Lazy chain (P + I)/2 has the same stationary law and is aperiodic.
    for _ in 0..POWER_CAP {
        let next: Vec<f64> = (0..s)
            .map(|j| 0.5 * pi[j] + 0.5 * (0..s).map(|i| pi[i] * p[(i, j)]).sum::<f64>())
            .collect();
        let diff = next
            .iter()
            .zip(&pi)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>();
        pi = next;
        if diff <= POWER_TOL {
            return Ok(pi);
        }
    }
    Err(NumericsError::NoConvergence {
        iterations: POWER_CAP,
    }
    .into())
}

fn check_stochastic(p: &DenseMatrix) -> Result<(), ProblemError> {
    if !p.is_square() || p.rows() == 0 {
        return Err(ProblemError::Dimension(format!(
            "transition matrix must be square and nonempty, got {:?}",
            p.shape()
        )));
    }
    for i in 0..p.rows() {
        let row = p.row(i);
        if let Some(j) = row.iter().position(|&v| v < 0.0) {
            return Err(ProblemError::NotRowStochastic(format!(
                "negative entry at ({i}, {j})"
            )));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(ProblemError::NotRowStochastic(format!(
                "row {i} sums to {sum}"
            )));
        }
    }
    Ok(())
}

fn reaches_all(s: usize, edge: impl Fn(usize, usize) -> bool) -> bool {
    let mut seen = vec![false; s];
    seen[0] = true;
    let mut queue = VecDeque::from([0]);
    while let Some(u) = queue.pop_front() {
        for v in 0..s {
            if !seen[v] && edge(u, v) {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    seen.into_iter().all(|b| b)
}

fn is_irreducible(p: &DenseMatrix) -> bool {
    let s = p.rows();
    reaches_all(s, |u, v| p[(u, v)] > 0.0) && reaches_all(s, |u, v| p[(v, u)] > 0.0)
}

/// An MDP, its features and discount, with the stationary law precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct GtdModel {
    mdp: Mdp,
    features: DenseMatrix,
    gamma: f64,
    pi: Vec<f64>,
    cumulative_pi: Vec<f64>,
    cumulative_rows: Vec<Vec<f64>>,
}

impl GtdModel {
    pub fn new(mdp: Mdp, features: DenseMatrix, gamma: f64) -> Result<Self, ProblemError> {
        if !(0.0..1.0).contains(&gamma) {
            return Err(ProblemError::InvalidParameter(format!(
                "discount must lie in [0, 1), got {gamma}"
            )));
        }
        let pi = stationary_distribution(&mdp.transitions)?;
        let s = pi.len();
        if features.rows() != s || features.cols() == 0 {
            return Err(ProblemError::Dimension(format!(
                "features must be {s}×d with d ≥ 1, got {:?}",
                features.shape()
            )));
        }
        if features.cols() > s {
            return Err(ProblemError::RankDeficientFeatures);
        }
        let gram = features.transpose().matmul(&features)?;
        let eig = symmetric_eigen(&gram)?;
        let top = eig.values.last().copied().unwrap_or(0.0);
        if eig.values[0] <= RANK_RTOL * top.max(f64::MIN_POSITIVE) {
            return Err(ProblemError::RankDeficientFeatures);
        }
        if mdp.rewards.is_empty() {
            return Err(ProblemError::InvalidParameter(
                "at least one agent reward table is required".into(),
            ));
        }
        for (i, r) in mdp.rewards.iter().enumerate() {
            if r.len() != s {
                return Err(ProblemError::Dimension(format!(
                    "agent {i} has {} rewards for {s} states",
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(ProblemError::InvalidParameter(format!(
                    "agent {i} has a non-finite reward"
                )));
            }
        }
        let cumulative = |w: &[f64]| {
            let mut acc = 0.0;
            w.iter()
                .map(|v| {
                    acc += v;
                    acc
                })
                .collect::<Vec<_>>()
        };
        let cumulative_pi = cumulative(&pi);
        let cumulative_rows = (0..s).map(|i| cumulative(mdp.transitions.row(i))).collect();
        Ok(Self {
            mdp,
            features,
            gamma,
            pi,
            cumulative_pi,
            cumulative_rows,
        })
    }

    pub fn mdp(&self) -> &Mdp {
        &self.mdp
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn stationary(&self) -> &[f64] {
        &self.pi
    }

    pub fn d(&self) -> usize {
        self.features.cols()
    }

    pub fn agents(&self) -> usize {
        self.mdp.rewards.len()
    }

    pub fn states(&self) -> usize {
        self.pi.len()
    }

    pub fn feature(&self, s: usize) -> &[f64] {
        self.features.row(s)
    }

    pub fn reward(&self, agent: usize, s: usize) -> f64 {
        self.mdp.rewards[agent][s]
    }

    /// `(φφᵀ, φ(φ − γφ′)ᵀ)` for one transition `s → s′`.
    pub fn sample_blocks(&self, s: usize, s_next: usize) -> (DenseMatrix, DenseMatrix) {
        let d = self.d();
        let phi = self.feature(s);
        let phi_next = self.feature(s_next);
        let a11 = DenseMatrix::from_fn(d, d, |i, j| phi[i] * phi[j]);
        let a12 = DenseMatrix::from_fn(d, d, |i, j| phi[i] * (phi[j] - self.gamma * phi_next[j]));
        (a11, a12)
    }

    /// Draws `s ~ π` and `s′ ~ P(s, ·)`.
    pub fn sample_transition<R: Rng + ?Sized>(&self, rng: &mut R) -> (usize, usize) {
        let u1 = rng.random::<f64>();
        let u2 = rng.random::<f64>();
        self.sample_from_uniforms(u1, u2)
    }

    /// Inverse-CDF transition draw from two uniforms in `[0, 1)`.
    pub fn sample_from_uniforms(&self, u1: f64, u2: f64) -> (usize, usize) {
        let s = pick(&self.cumulative_pi, u1);
        (s, pick(&self.cumulative_rows[s], u2))
    }

    /// The unscaled block system: expectations of the sample blocks under
    /// the stationary transition law.
    pub fn system(&self) -> Result<BlockSystem, ProblemError> {
        let d = self.d();
        let s_count = self.states();
        let p = &self.mdp.transitions;
        let mut a11 = DenseMatrix::zeros(d, d);
        let mut a12 = DenseMatrix::zeros(d, d);
        for s in 0..s_count {
            let phi = self.feature(s);
            for i in 0..d {
                for j in 0..d {
                    a11[(i, j)] += self.pi[s] * phi[i] * phi[j];
                }
            }
            for s_next in 0..s_count {
                let w = self.pi[s] * p[(s, s_next)];
                if w == 0.0 {
                    continue;
                }
                let phi_next = self.feature(s_next);
                for i in 0..d {
                    for j in 0..d {
                        a12[(i, j)] += w * phi[i] * (phi[j] - self.gamma * phi_next[j]);
                    }
                }
            }
        }
        match solve_linear(&a12, &DenseVector::zeros(d)) {
            Err(NumericsError::Singular { .. }) => return Err(ProblemError::SingularA12),
            Err(e) => return Err(e.into()),
            Ok(_) => {}
        }
        let a21 = a12.transpose().scale(-1.0);
        let b1 = (0..self.agents())
            .map(|agent| {
                let v = (0..d)
                    .map(|i| {
                        (0..s_count)
                            .map(|s| self.pi[s] * self.reward(agent, s) * self.feature(s)[i])
                            .sum()
                    })
                    .collect();
                DenseVector::new(v)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let b2 = vec![DenseVector::zeros(d); self.agents()];
        BlockSystem::new(a11, a12, a21, DenseMatrix::zeros(d, d), b1, b2)
    }
}

fn pick(cumulative: &[f64], u: f64) -> usize {
    let target = u * cumulative.last().copied().unwrap_or(1.0);
    cumulative
        .iter()
        .position(|&c| target < c)
        .unwrap_or(cumulative.len() - 1)
}

/// Unscaled GTD block system.
pub fn gtd_instance(
    mdp: &Mdp,
    features: &DenseMatrix,
    gamma: f64,
) -> Result<BlockSystem, ProblemError> {
    GtdModel::new(mdp.clone(), features.clone(), gamma)?.system()
}

/// Random model with dense positive transitions (hence irreducible and
/// aperiodic), Gaussian features and uniform rewards in `[0, 1)`.
pub fn random_gtd_model(
    states: usize,
    d: usize,
    agents: usize,
    gamma: f64,
    seed: u64,
) -> Result<GtdModel, ProblemError> {
    if states == 0 || d == 0 || agents == 0 || d > states {
        return Err(ProblemError::InvalidParameter(format!(
            "need states ≥ d ≥ 1 and agents ≥ 1, got states = {states}, d = {d}, agents = {agents}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transitions = DenseMatrix::from_fn(states, states, |_, _| rng.random_range(0.1..1.0));
    for i in 0..states {
        let total: f64 = transitions.row(i).iter().sum();
        transitions.row_mut(i).iter_mut().for_each(|v| *v /= total);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let features = DenseMatrix::from_fn(states, d, |_, _| normal.sample(&mut rng));
    let rewards = (0..agents)
        .map(|_| (0..states).map(|_| rng.random::<f64>()).collect())
        .collect();
    GtdModel::new(
        Mdp {
            transitions,
            rewards,
        },
        features,
        gamma,
    )
}

/// Compares the closed-form GTD fixed point `y* = A12⁻¹ b̄1`,
/// `x* = A11⁻¹(A21ᵀ y* + b̄1)` with the stacked solve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GtdConsistencyReport {
    pub closed_form: (Vec<f64>, Vec<f64>),
    pub stacked: (Vec<f64>, Vec<f64>),
    /// Largest entrywise gap between the closed form and the stacked solve
    /// against the averaged right-hand side.
    pub difference: f64,
    pub agrees: bool,
    /// `‖y*‖` of the summed right-hand side over `‖y*‖` of the closed form.
    /// Absent when the closed form is zero.
    pub sum_convention_ratio: Option<f64>,
}

pub fn gtd_consistency_check(sys: &BlockSystem) -> Result<GtdConsistencyReport, ProblemError> {
    let b1 = sys.b1_mean();
    let y = solve_linear(sys.a12(), &b1).map_err(|e| match e {
        NumericsError::Singular { .. } => ProblemError::SingularA12,
        e => e.into(),
    })?;
    let x = solve_linear(sys.a11(), &sys.a21().transpose().mul_vec(&y)?.add(&b1))?;
    let stacked = exact_solution(sys)?;
    let dx = x.sub(&stacked.x_star);
    let dy = y.sub(&stacked.y_star);
    let difference = dx
        .as_slice()
        .iter()
        .chain(dy.as_slice())
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = 1.0 + x.norm().max(y.norm());
    let summed = super::exact_solution_with(sys, super::RhsConvention::Sum)?;
    let sum_convention_ratio = (y.norm() > 0.0).then(|| summed.y_star.norm() / y.norm());
    Ok(GtdConsistencyReport {
        closed_form: (x.into_vec(), y.into_vec()),
        stacked: (stacked.x_star.into_vec(), stacked.y_star.into_vec()),
        difference,
        agrees: difference <= 1e-8 * scale,
        sum_convention_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_state(rewards: Vec<Vec<f64>>) -> Mdp {
        Mdp {
            transitions: DenseMatrix::from_fn(2, 2, |_, _| 0.5),
            rewards,
        }
    }

    #[test]
    fn two_state_enumeration() {
        let mdp = two_state(vec![vec![0.0, 0.0]]);
        let f = DenseMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let model = GtdModel::new(mdp, f, 0.9).unwrap();
        assert!((model.stationary()[0] - 0.5).abs() < 1e-15);
        let sys = model.system().unwrap();
        assert!((sys.a11()[(0, 0)] - 2.5).abs() < 1e-15);
        assert_eq!(sys.b1()[0].as_slice(), &[0.0]);
    }

    #[test]
    fn zero_discount_gives_a12_equal_a11() {
        let mdp = two_state(vec![vec![1.0, -1.0]]);
        let f = DenseMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        let sys = gtd_instance(&mdp, &f, 0.0).unwrap();
        assert!((sys.a12()[(0, 0)] - sys.a11()[(0, 0)]).abs() < 1e-15);
        assert!((sys.a21()[(0, 0)] + sys.a11()[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn structural_identities() {
        let p =
            DenseMatrix::from_rows(&[[0.1, 0.6, 0.3], [0.5, 0.2, 0.3], [0.3, 0.3, 0.4]]).unwrap();
        let f = DenseMatrix::from_rows(&[[1.0, 0.0], [0.5, 1.0], [0.0, 1.0]]).unwrap();
        let mdp = Mdp {
            transitions: p,
            rewards: vec![vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]],
        };
        let sys = gtd_instance(&mdp, &f, 0.9).unwrap();
        assert_eq!(*sys.a21(), sys.a12().transpose().scale(-1.0));
        assert_eq!(sys.a22().max_abs(), 0.0);
        let report = gtd_consistency_check(&sys).unwrap();
        assert!(report.agrees, "{report:?}");
        assert!((report.sum_convention_ratio.unwrap() - 2.0).abs() < 1e-9);
    }

    #[test]
    fn invalid_inputs() {
        let reducible = Mdp {
            transitions: DenseMatrix::identity(2),
            rewards: vec![vec![0.0, 0.0]],
        };
        let f = DenseMatrix::new(2, 1, vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            gtd_instance(&reducible, &f, 0.5),
            Err(ProblemError::ReducibleChain)
        ));
        let flat = DenseMatrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert!(matches!(
            gtd_instance(&two_state(vec![vec![0.0, 0.0]]), &flat, 0.5),
            Err(ProblemError::RankDeficientFeatures)
        ));
        let bad = Mdp {
            transitions: DenseMatrix::from_rows(&[[0.5, 0.6], [0.5, 0.5]]).unwrap(),
            rewards: vec![vec![0.0, 0.0]],
        };
        assert!(matches!(
            gtd_instance(&bad, &f, 0.5),
            Err(ProblemError::NotRowStochastic(_))
        ));
    }

    #[test]
    fn consistency_check_rejects_singular_a12() {
        let m = |x: f64| DenseMatrix::new(1, 1, vec![x]).unwrap();
        let v = |x: f64| DenseVector::new(vec![x]).unwrap();
        let sys =
            BlockSystem::new(m(1.0), m(0.0), m(0.0), m(1.0), vec![v(1.0)], vec![v(0.0)]).unwrap();
        assert!(matches!(
            gtd_consistency_check(&sys),
            Err(ProblemError::SingularA12)
        ));
    }

    #[test]
    fn periodic_chain_stationary() {
        let p = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let pi = stationary_distribution(&p).unwrap();
        assert!((pi[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn power_fallback_matches_direct_solve() {
        let p =
            DenseMatrix::from_rows(&[[0.2, 0.8, 0.0], [0.1, 0.4, 0.5], [0.6, 0.0, 0.4]]).unwrap();
        let direct = stationary_distribution(&p).unwrap();
        let power = power_stationary(&p).unwrap();
        for (a, b) in direct.iter().zip(&power) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn random_model_is_valid_and_deterministic() {
        let a = random_gtd_model(5, 2, 4, 0.9, 3).unwrap();
        let b = random_gtd_model(5, 2, 4, 0.9, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.states(), a.d(), a.agents()), (5, 2, 4));
        assert!(a.stationary().iter().all(|&p| p > 0.0));
        let report = gtd_consistency_check(&a.system().unwrap()).unwrap();
        assert!(report.agrees);
        assert!(random_gtd_model(2, 3, 1, 0.5, 0).is_err());
    }
}
