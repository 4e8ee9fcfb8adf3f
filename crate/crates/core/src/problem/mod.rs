//! The coupled linear system the network is solving, its generators and
//! its exact solution.

mod gtd;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    min_real_part, solve_linear, solve_many, DenseMatrix, DenseVector, NumericsError,
};

pub use gtd::{
    gtd_consistency_check, gtd_instance, random_gtd_model, stationary_distribution,
    GtdConsistencyReport, GtdModel, Mdp,
};

/// Real parts at or below this are treated as not positive.
pub const STABILITY_TOL: f64 = 1e-12;
/// Relative slack on the stored bound `R` and on `‖A_ij‖ ≤ 1`.
pub const NORM_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProblemError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("transition matrix is not row stochastic: {0}")]
    NotRowStochastic(String),
    #[error("Markov chain is reducible")]
    ReducibleChain,
    #[error("feature matrix does not have full column rank")]
    RankDeficientFeatures,
    #[error("A12 is singular")]
    SingularA12,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// One node's private copy of the four blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeBlocks {
    pub a11: DenseMatrix,
    pub a12: DenseMatrix,
    pub a21: DenseMatrix,
    pub a22: DenseMatrix,
}

impl NodeBlocks {
    fn blocks(&self) -> [&DenseMatrix; 4] {
        [&self.a11, &self.a12, &self.a21, &self.a22]
    }
}

/// `[[A11, A12], [A21, A22]] (x; y) = b` distributed over `N` nodes, node `i`
/// holding `b1ⁱ, b2ⁱ`.
///
/// In the heterogeneous variant every node also owns its blocks, and the
/// shared blocks hold their node average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BlockSystemDoc", into = "BlockSystemDoc")]
pub struct BlockSystem {
    d: usize,
    nodes: usize,
    a11: DenseMatrix,
    a12: DenseMatrix,
    a21: DenseMatrix,
    a22: DenseMatrix,
    b1: Vec<DenseVector>,
    b2: Vec<DenseVector>,
    r: f64,
    per_node: Option<Vec<NodeBlocks>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockSystemDoc {
    d: usize,
    nodes: usize,
    a11: Vec<f64>,
    a12: Vec<f64>,
    a21: Vec<f64>,
    a22: Vec<f64>,
    b1: Vec<Vec<f64>>,
    b2: Vec<Vec<f64>>,
    r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    per_node: Option<Vec<NodeBlocks>>,
}

impl TryFrom<BlockSystemDoc> for BlockSystem {
    type Error = ProblemError;

    fn try_from(doc: BlockSystemDoc) -> Result<Self, Self::Error> {
        let d = doc.d;
        let m = |v: Vec<f64>| DenseMatrix::new(d, d, v);
        let vs = |v: Vec<Vec<f64>>| {
            v.into_iter()
                .map(DenseVector::new)
                .collect::<Result<Vec<_>, _>>()
        };
        let b1 = vs(doc.b1)?;
        let b2 = vs(doc.b2)?;
        if b1.len() != doc.nodes {
            return Err(ProblemError::Dimension(format!(
                "{} b1 vectors for {} nodes",
                b1.len(),
                doc.nodes
            )));
        }
        let mut sys = match doc.per_node {
            Some(blocks) => BlockSystem::heterogeneous(blocks, b1, b2)?,
            None => BlockSystem::new(m(doc.a11)?, m(doc.a12)?, m(doc.a21)?, m(doc.a22)?, b1, b2)?,
        };
        sys.set_r(doc.r)?;
        Ok(sys)
    }
}

impl From<BlockSystem> for BlockSystemDoc {
    fn from(s: BlockSystem) -> Self {
        let vs = |v: Vec<DenseVector>| v.into_iter().map(DenseVector::into_vec).collect();
        BlockSystemDoc {
            d: s.d,
            nodes: s.nodes,
            a11: s.a11.into_vec(),
            a12: s.a12.into_vec(),
            a21: s.a21.into_vec(),
            a22: s.a22.into_vec(),
            b1: vs(s.b1),
            b2: vs(s.b2),
            r: s.r,
            per_node: s.per_node,
        }
    }
}

fn max_b_norm(b1: &[DenseVector], b2: &[DenseVector]) -> f64 {
    b1.iter()
        .chain(b2)
        .map(DenseVector::norm)
        .fold(0.0, f64::max)
}

fn check_vectors(d: usize, b1: &[DenseVector], b2: &[DenseVector]) -> Result<usize, ProblemError> {
    if b1.is_empty() {
        return Err(ProblemError::InvalidParameter(
            "at least one node is required".into(),
        ));
    }
    if b1.len() != b2.len() {
        return Err(ProblemError::Dimension(format!(
            "{} b1 vectors but {} b2 vectors",
            b1.len(),
            b2.len()
        )));
    }
    if let Some(v) = b1.iter().chain(b2).find(|v| v.dim() != d) {
        return Err(ProblemError::Dimension(format!(
            "vector of length {} in a system of dimension {d}",
            v.dim()
        )));
    }
    Ok(b1.len())
}

fn check_blocks(blocks: [&DenseMatrix; 4]) -> Result<usize, ProblemError> {
    let d = blocks[0].rows();
    if d == 0 {
        return Err(ProblemError::InvalidParameter(
            "dimension must be at least 1".into(),
        ));
    }
    if let Some(m) = blocks.iter().find(|m| m.shape() != (d, d)) {
        return Err(ProblemError::Dimension(format!(
            "block of shape {:?} in a system of dimension {d}",
            m.shape()
        )));
    }
    Ok(d)
}

impl BlockSystem {
    /// Homogeneous system. `R` is set to the largest `‖bⁱ‖`.
    pub fn new(
        a11: DenseMatrix,
        a12: DenseMatrix,
        a21: DenseMatrix,
        a22: DenseMatrix,
        b1: Vec<DenseVector>,
        b2: Vec<DenseVector>,
    ) -> Result<Self, ProblemError> {
        let d = check_blocks([&a11, &a12, &a21, &a22])?;
        let nodes = check_vectors(d, &b1, &b2)?;
        let r = max_b_norm(&b1, &b2);
        Ok(Self {
            d,
            nodes,
            a11,
            a12,
            a21,
            a22,
            b1,
            b2,
            r,
            per_node: None,
        })
    }

    /// Heterogeneous system with per-node blocks.
    pub fn heterogeneous(
        per_node: Vec<NodeBlocks>,
        b1: Vec<DenseVector>,
        b2: Vec<DenseVector>,
    ) -> Result<Self, ProblemError> {
        let first = per_node.first().ok_or_else(|| {
            ProblemError::InvalidParameter("at least one node is required".into())
        })?;
        let d = check_blocks(first.blocks())?;
        for nb in &per_node {
            if check_blocks(nb.blocks())? != d {
                return Err(ProblemError::Dimension(
                    "per-node blocks differ in dimension".into(),
                ));
            }
        }
        let nodes = check_vectors(d, &b1, &b2)?;
        if per_node.len() != nodes {
            return Err(ProblemError::Dimension(format!(
                "{} block sets for {nodes} nodes",
                per_node.len()
            )));
        }
        let mean = |f: fn(&NodeBlocks) -> &DenseMatrix| {
            let inv = 1.0 / nodes as f64;
            DenseMatrix::from_fn(d, d, |i, j| {
                per_node.iter().map(|nb| f(nb)[(i, j)]).sum::<f64>() * inv
            })
        };
        let a11 = mean(|nb| &nb.a11);
        let a12 = mean(|nb| &nb.a12);
        let a21 = mean(|nb| &nb.a21);
        let a22 = mean(|nb| &nb.a22);
        let r = max_b_norm(&b1, &b2);
        Ok(Self {
            d,
            nodes,
            a11,
            a12,
            a21,
            a22,
            b1,
            b2,
            r,
            per_node: Some(per_node),
        })
    }

    /// Overrides the stored bound `R`.
    pub fn set_r(&mut self, r: f64) -> Result<(), ProblemError> {
        if !(r.is_finite() && r >= 0.0) {
            return Err(ProblemError::InvalidParameter(format!(
                "R must be finite and nonnegative, got {r}"
            )));
        }
        self.r = r;
        Ok(())
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn a11(&self) -> &DenseMatrix {
        &self.a11
    }

    pub fn a12(&self) -> &DenseMatrix {
        &self.a12
    }

    pub fn a21(&self) -> &DenseMatrix {
        &self.a21
    }

    pub fn a22(&self) -> &DenseMatrix {
        &self.a22
    }

    pub fn b1(&self) -> &[DenseVector] {
        &self.b1
    }

    pub fn b2(&self) -> &[DenseVector] {
        &self.b2
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn is_heterogeneous(&self) -> bool {
        self.per_node.is_some()
    }

    pub fn per_node(&self) -> Option<&[NodeBlocks]> {
        self.per_node.as_deref()
    }

    /// Blocks used by node `i`.
    pub fn node_blocks(&self, i: usize) -> [&DenseMatrix; 4] {
        match &self.per_node {
            Some(p) => p[i].blocks(),
            None => [&self.a11, &self.a12, &self.a21, &self.a22],
        }
    }

    pub fn b1_mean(&self) -> DenseVector {
        DenseVector::mean_of(&self.b1)
    }

    pub fn b2_mean(&self) -> DenseVector {
        DenseVector::mean_of(&self.b2)
    }

    /// `b1ⁱ` stacked as the rows of an `N×d` matrix.
    pub fn b1_matrix(&self) -> DenseMatrix {
        rows_matrix(&self.b1, self.d)
    }

    pub fn b2_matrix(&self) -> DenseMatrix {
        rows_matrix(&self.b2, self.d)
    }

    /// Schur complement `Δ = A22 − A21·A11⁻¹·A12`.
    pub fn delta(&self) -> Result<DenseMatrix, ProblemError> {
        let inv_a12 = solve_many(&self.a11, &self.a12)?;
        Ok(self.a22.sub(&self.a21.matmul(&inv_a12)?)?)
    }

    /// The `2d×2d` stacked matrix.
    pub fn stacked(&self) -> DenseMatrix {
        DenseMatrix::from_blocks(&self.a11, &self.a12, &self.a21, &self.a22)
            .expect("blocks share one dimension")
    }

    /// Largest Frobenius norm among all blocks, per-node ones included.
    pub fn max_block_norm(&self) -> f64 {
        let shared = [&self.a11, &self.a12, &self.a21, &self.a22];
        let per = self.per_node.iter().flatten().flat_map(NodeBlocks::blocks);
        shared
            .into_iter()
            .chain(per)
            .map(DenseMatrix::frobenius_norm)
            .fold(0.0, f64::max)
    }

    /// Multiplies every block and every vector by `c`; `R` is recomputed.
    pub fn scaled(&self, c: f64) -> BlockSystem {
        let sv = |v: &[DenseVector]| v.iter().map(|x| x.scale(c)).collect::<Vec<_>>();
        let b1 = sv(&self.b1);
        let b2 = sv(&self.b2);
        match &self.per_node {
            Some(p) => {
                let per_node = p
                    .iter()
                    .map(|nb| NodeBlocks {
                        a11: nb.a11.scale(c),
                        a12: nb.a12.scale(c),
                        a21: nb.a21.scale(c),
                        a22: nb.a22.scale(c),
                    })
                    .collect();
                BlockSystem::heterogeneous(per_node, b1, b2).expect("shapes unchanged")
            }
            None => BlockSystem::new(
                self.a11.scale(c),
                self.a12.scale(c),
                self.a21.scale(c),
                self.a22.scale(c),
                b1,
                b2,
            )
            .expect("shapes unchanged"),
        }
    }
}

fn rows_matrix(v: &[DenseVector], d: usize) -> DenseMatrix {
    DenseMatrix::from_fn(v.len(), d, |i, j| v[i][j])
}

/// Which right-hand side the stacked system is solved against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhsConvention {
    /// `b̄ = (1/N) Σ bⁱ`: the point the distributed iteration converges to.
    #[default]
    Average,
    /// `Σ bⁱ`.
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub x_star: DenseVector,
    pub y_star: DenseVector,
}

impl Solution {
    /// Max-norm of the stacked residual `A (x*; y*) − b`.
    pub fn residual(&self, sys: &BlockSystem, conv: RhsConvention) -> f64 {
        let (b1, b2) = rhs(sys, conv);
        let r1 = sys.a11.mul_vec(&self.x_star).map(|v| {
            v.add(&sys.a12.mul_vec(&self.y_star).expect("dims"))
                .sub(&b1)
        });
        let r2 = sys.a21.mul_vec(&self.x_star).map(|v| {
            v.add(&sys.a22.mul_vec(&self.y_star).expect("dims"))
                .sub(&b2)
        });
        match (r1, r2) {
            (Ok(r1), Ok(r2)) => r1
                .as_slice()
                .iter()
                .chain(r2.as_slice())
                .fold(0.0, |m, v| m.max(v.abs())),
            _ => f64::INFINITY,
        }
    }
}

fn rhs(sys: &BlockSystem, conv: RhsConvention) -> (DenseVector, DenseVector) {
    match conv {
        RhsConvention::Average => (sys.b1_mean(), sys.b2_mean()),
        RhsConvention::Sum => (DenseVector::sum_of(&sys.b1), DenseVector::sum_of(&sys.b2)),
    }
}

/// Solution against the node-averaged right-hand side.
pub fn exact_solution(sys: &BlockSystem) -> Result<Solution, ProblemError> {
    exact_solution_with(sys, RhsConvention::Average)
}

/// Schur-complement solve of the stacked system.
pub fn exact_solution_with(
    sys: &BlockSystem,
    conv: RhsConvention,
) -> Result<Solution, ProblemError> {
    let (b1, b2) = rhs(sys, conv);
    let inv_b1 = solve_linear(&sys.a11, &b1)?;
    let delta = sys.delta()?;
    let y_star = solve_linear(&delta, &b2.sub(&sys.a21.mul_vec(&inv_b1)?))?;
    let x_star = solve_linear(&sys.a11, &b1.sub(&sys.a12.mul_vec(&y_star)?))?;
    Ok(Solution { x_star, y_star })
}

/// Scales the whole system by `c = 1 / max(1, max ‖A_ij‖_F)` so every block
/// has norm at most one. Returns the scaled system and `c`.
pub fn scale_to_assumption2(sys: &BlockSystem) -> (BlockSystem, f64) {
    let c = 1.0 / sys.max_block_norm().max(1.0);
    if c == 1.0 {
        (sys.clone(), 1.0)
    } else {
        (sys.scaled(c), c)
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, std: f64) -> DenseMatrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    DenseMatrix::from_fn(n, n, |_, _| dist.sample(rng))
}

fn gaussian_vector(rng: &mut ChaCha8Rng, n: usize) -> DenseVector {
    let dist = Normal::new(0.0, 1.0).expect("positive std");
    DenseVector::new((0..n).map(|_| dist.sample(rng)).collect()).expect("finite samples")
}

fn spd(rng: &mut ChaCha8Rng, d: usize, margin: f64) -> DenseMatrix {
    let m = gaussian_matrix(rng, d, (1.0 / d as f64).sqrt());
    let mut a = m.transpose().matmul(&m).expect("square");
    for i in 0..d {
        a[(i, i)] += margin;
    }
    a
}

fn check_instance_params(d: usize, n: usize, margin: f64) -> Result<(), ProblemError> {
    if d == 0 || n == 0 {
        return Err(ProblemError::InvalidParameter(format!(
            "d and N must be at least 1, got d = {d}, N = {n}"
        )));
    }
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(ProblemError::InvalidParameter(format!(
            "delta_margin must be positive, got {margin}"
        )));
    }
    Ok(())
}

/// Random homogeneous instance with `A11 ⪰ margin·I` and `Δ ⪰ margin·I`
/// before scaling, already scaled so every block norm is at most one.
pub fn random_instance(
    d: usize,
    n: usize,
    seed: u64,
    delta_margin: f64,
) -> Result<BlockSystem, ProblemError> {
    check_instance_params(d, n, delta_margin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = (1.0 / d as f64).sqrt();
    let a11 = spd(&mut rng, d, delta_margin);
    let delta = spd(&mut rng, d, delta_margin);
    let a12 = gaussian_matrix(&mut rng, d, std);
    let a21 = gaussian_matrix(&mut rng, d, std);
    let a22 = delta.add(&a21.matmul(&solve_many(&a11, &a12)?)?)?;
    let b1 = (0..n).map(|_| gaussian_vector(&mut rng, d)).collect();
    let b2 = (0..n).map(|_| gaussian_vector(&mut rng, d)).collect();
    let sys = BlockSystem::new(a11, a12, a21, a22, b1, b2)?;
    Ok(scale_to_assumption2(&sys).0)
}

/// Heterogeneous instance: a random homogeneous base whose blocks are
/// perturbed per node by `spread`-sized deviations that cancel on average,
/// so the averaged blocks equal the base ones.
pub fn random_heterogeneous_instance(
    d: usize,
    n: usize,
    seed: u64,
    delta_margin: f64,
    spread: f64,
) -> Result<BlockSystem, ProblemError> {
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(ProblemError::InvalidParameter(format!(
            "spread must be nonnegative, got {spread}"
        )));
    }
    let base = random_instance(d, n, seed, delta_margin)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let std = spread / d as f64;
    let mut devs: Vec<[DenseMatrix; 4]> = (0..n)
        .map(|_| std::array::from_fn(|_| gaussian_matrix(&mut rng, d, std.max(f64::MIN_POSITIVE))))
        .collect();
    for b in 0..4 {
        let mean = DenseMatrix::from_fn(d, d, |i, j| {
            devs.iter().map(|e| e[b][(i, j)]).sum::<f64>() / n as f64
        });
        for e in devs.iter_mut() {
            e[b] = e[b].sub(&mean).expect("same shape");
        }
    }
    let per_node = devs
        .into_iter()
        .map(|[e11, e12, e21, e22]| NodeBlocks {
            a11: base.a11.add(&e11).expect("same shape"),
            a12: base.a12.add(&e12).expect("same shape"),
            a21: base.a21.add(&e21).expect("same shape"),
            a22: base.a22.add(&e22).expect("same shape"),
        })
        .collect();
    let sys = BlockSystem::heterogeneous(per_node, base.b1, base.b2)?;
    Ok(scale_to_assumption2(&sys).0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssumptionsReport {
    /// `A11` and `Δ` positive stable (averaged blocks when heterogeneous).
    pub assumption1: bool,
    pub min_real_a11: f64,
    pub min_real_delta: f64,
    /// Every block norm at most one and every `‖bⁱ‖` at most `R`.
    pub assumption2: bool,
    /// Frobenius norms of the shared `A11, A12, A21, A22`.
    pub block_norms: [f64; 4],
    /// Largest block norm including per-node blocks.
    pub max_block_norm: f64,
    pub max_b_norm: f64,
    pub r: f64,
    pub heterogeneous: bool,
}

impl AssumptionsReport {
    pub fn all_pass(&self) -> bool {
        self.assumption1 && self.assumption2
    }
}

pub fn validate_assumptions(sys: &BlockSystem) -> AssumptionsReport {
    let min_real_a11 = min_real_part(&sys.a11).unwrap_or(f64::NAN);
    let min_real_delta = sys
        .delta()
        .ok()
        .and_then(|delta| min_real_part(&delta).ok())
        .unwrap_or(f64::NAN);
    let assumption1 = min_real_a11 > STABILITY_TOL && min_real_delta > STABILITY_TOL;
    let block_norms = [&sys.a11, &sys.a12, &sys.a21, &sys.a22].map(DenseMatrix::frobenius_norm);
    let max_block_norm = sys.max_block_norm();
    let max_b_norm = max_b_norm(&sys.b1, &sys.b2);
    let assumption2 =
        max_block_norm <= 1.0 + NORM_SLACK && max_b_norm <= sys.r * (1.0 + NORM_SLACK);
    AssumptionsReport {
        assumption1,
        min_real_a11,
        min_real_delta,
        assumption2,
        block_norms,
        max_block_norm,
        max_b_norm,
        r: sys.r,
        heterogeneous: sys.is_heterogeneous(),
    }
}
