//! Communication graphs and the doubly stochastic mixing matrices built on them.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{second_singular_value, DenseMatrix, NumericsError};

/// Absolute tolerance on each row and column sum.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Accuracy requested from the σ₂ power iteration.
pub const SIGMA_TOL: f64 = 1e-12;
/// Resampling cap for Erdős–Rényi graphs.
pub const ER_MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("edge ({0}, {1}) references a node outside 0..{2}")]
    NodeOutOfRange(usize, usize, usize),
    #[error("graph on {0} nodes is not connected")]
    Disconnected(usize),
    #[error("no connected Erdős–Rényi sample within {0} attempts")]
    ConnectivityCapExceeded(usize),
    #[error("mixing parameter σ = {0} is not below 1")]
    NotMixing(f64),
    #[error("weight matrix violates doubly stochastic / positive diagonal conditions: {0}")]
    Assumption(String),
    #[error("malformed edge list line {line}: {text:?}")]
    EdgeList { line: usize, text: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Ring,
    Path,
    Star,
    Complete,
    ErdosRenyi,
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Path => "path",
            TopologyKind::Star => "star",
            TopologyKind::Complete => "complete",
            TopologyKind::ErdosRenyi => "erdos_renyi",
        };
        f.write_str(s)
    }
}

impl FromStr for TopologyKind {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ring" => Ok(TopologyKind::Ring),
            "path" => Ok(TopologyKind::Path),
            "star" => Ok(TopologyKind::Star),
            "complete" => Ok(TopologyKind::Complete),
            "erdos_renyi" => Ok(TopologyKind::ErdosRenyi),
            other => Err(NetworkError::InvalidParameter(format!(
                "unknown topology kind {other:?}"
            ))),
        }
    }
}

/// Undirected simple graph. Edges are stored as `(i, j)` with `i < j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    node_count: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Topology {
    /// Builds a topology, rejecting self-loops, out-of-range endpoints and
    /// disconnected graphs (for two or more nodes).
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, NetworkError> {
        let t = Self::from_edges_unchecked(node_count, edges)?;
        if !t.is_connected() {
            return Err(NetworkError::Disconnected(node_count));
        }
        Ok(t)
    }

    fn from_edges_unchecked(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, NetworkError> {
        if node_count == 0 {
            return Err(NetworkError::InvalidParameter(
                "node count must be at least 1".into(),
            ));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(NetworkError::SelfLoop(i));
            }
            if i >= node_count || j >= node_count {
                return Err(NetworkError::NodeOutOfRange(i, j, node_count));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self {
            node_count,
            edges: set,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        is_connected(self.node_count, &self.neighbors())
    }

    /// One `"i j"` pair per line.
    pub fn to_edge_list(&self) -> String {
        self.edges
            .iter()
            .map(|(i, j)| format!("{i} {j}\n"))
            .collect()
    }

    pub fn from_edge_list(node_count: usize, text: &str) -> Result<Self, NetworkError> {
        let mut edges = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || NetworkError::EdgeList {
                line: line_no + 1,
                text: line.to_string(),
            };
            let mut parts = line.split_whitespace();
            let i = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let j = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            edges.push((i, j));
        }
        Self::new(node_count, edges)
    }
}

fn is_connected(n: usize, adj: &[Vec<usize>]) -> bool {
    if n <= 1 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Builds a connected topology of the requested family.
///
/// `edge_prob` is required for (and only accepted with) Erdős–Rényi graphs,
/// which are resampled until connected. `seed` is ignored by the
/// deterministic families.
pub fn build_topology(
    kind: TopologyKind,
    n: usize,
    edge_prob: Option<f64>,
    seed: u64,
) -> Result<Topology, NetworkError> {
    if n == 0 {
        return Err(NetworkError::InvalidParameter(
            "node count must be at least 1".into(),
        ));
    }
    match (kind, edge_prob) {
        (TopologyKind::ErdosRenyi, None) => {
            return Err(NetworkError::InvalidParameter(
                "erdos_renyi requires edge_prob".into(),
            ))
        }
        (TopologyKind::ErdosRenyi, Some(p)) if !(p > 0.0 && p <= 1.0) => {
            return Err(NetworkError::InvalidParameter(format!(
                "edge_prob must lie in (0, 1], got {p}"
            )))
        }
        (k, Some(_)) if k != TopologyKind::ErdosRenyi => {
            return Err(NetworkError::InvalidParameter(format!(
                "edge_prob is only meaningful for erdos_renyi, not {k}"
            )))
        }
        _ => {}
    }

    let edges: Vec<(usize, usize)> = match kind {
        TopologyKind::Ring => {
            if n < 3 {
                (1..n).map(|i| (i - 1, i)).collect()
            } else {
                (0..n).map(|i| (i, (i + 1) % n)).collect()
            }
        }
        TopologyKind::Path => (1..n).map(|i| (i - 1, i)).collect(),
        TopologyKind::Star => (1..n).map(|i| (0, i)).collect(),
        TopologyKind::Complete => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
        TopologyKind::ErdosRenyi => {
            let p = edge_prob.unwrap_or(1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..ER_MAX_ATTEMPTS {
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
                let t = Topology::from_edges_unchecked(n, edges)?;
                if t.is_connected() {
                    return Ok(t);
                }
            }
            return Err(NetworkError::ConnectivityCapExceeded(ER_MAX_ATTEMPTS));
        }
    };
    Topology::new(n, edges)
}

/// A mixing matrix tied to the graph it is supposed to respect.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    matrix: DenseMatrix,
    topology: Topology,
    sigma2: f64,
}

impl WeightMatrix {
    /// Wraps a matrix without checking the doubly stochastic conditions.
    /// Use [`validate_assumption3`] to inspect it.
    pub fn from_parts(matrix: DenseMatrix, topology: Topology) -> Result<Self, NetworkError> {
        let n = topology.node_count();
        if matrix.shape() != (n, n) {
            return Err(NumericsError::DimensionMismatch {
                op: "weight matrix",
                left: matrix.shape(),
                right: (n, n),
            }
            .into());
        }
        let sigma2 = second_singular_value(&matrix, SIGMA_TOL)?;
        Ok(Self {
            matrix,
            topology,
            sigma2,
        })
    }

    /// Wraps a matrix and rejects it unless every mixing condition holds.
    pub fn validated(matrix: DenseMatrix, topology: Topology) -> Result<Self, NetworkError> {
        let wm = Self::from_parts(matrix, topology)?;
        let report = validate_assumption3(&wm);
        if !report.all_pass() {
            return Err(NetworkError::Assumption(report.failures().join("; ")));
        }
        Ok(wm)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    /// Cached second largest singular value.
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
}

/// Metropolis–Hastings weights: `w_ij = 1 / (1 + max(deg_i, deg_j))` on edges,
/// with the remainder on the diagonal.
pub fn metropolis_weights(t: &Topology) -> WeightMatrix {
    let n = t.node_count();
    let deg = t.degrees();
    let mut m = DenseMatrix::zeros(n, n);
    for (i, j) in t.edges() {
        let w = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        m[(i, j)] = w;
        m[(j, i)] = w;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)]).sum();
        m[(i, i)] = 1.0 - off;
    }
    WeightMatrix::from_parts(m, t.clone()).expect("metropolis matrix has topology dimensions")
}

/// `(1 − λ)·Metropolis + λ·I`; larger laziness means slower mixing.
pub fn lazy_weights(t: &Topology, laziness: f64) -> Result<WeightMatrix, NetworkError> {
    if !(0.0..1.0).contains(&laziness) {
        return Err(NetworkError::InvalidParameter(format!(
            "laziness must lie in [0, 1), got {laziness}"
        )));
    }
    let base = metropolis_weights(t);
    if laziness == 0.0 {
        return Ok(base);
    }
    let n = t.node_count();
    let m = DenseMatrix::from_fn(n, n, |i, j| {
        let keep = (1.0 - laziness) * base.matrix[(i, j)];
        if i == j {
            keep + laziness
        } else {
            keep
        }
    });
    WeightMatrix::from_parts(m, t.clone())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(passed: bool, detail: String) -> Self {
        Self { passed, detail }
    }
}

/// Outcome of checking a weight matrix against the mixing conditions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assumption3Report {
    pub row_sums: Check,
    pub column_sums: Check,
    pub positive_diagonal: Check,
    /// `w_ij > 0` exactly on the edges of the topology.
    pub support_matches_topology: Check,
    /// The graph of positive off-diagonal weights is connected and σ₂ < 1.
    pub connected: Check,
    pub sigma2: f64,
}

impl Assumption3Report {
    fn checks(&self) -> [(&'static str, &Check); 5] {
        [
            ("row_sums", &self.row_sums),
            ("column_sums", &self.column_sums),
            ("positive_diagonal", &self.positive_diagonal),
            ("support_matches_topology", &self.support_matches_topology),
            ("connected", &self.connected),
        ]
    }

    pub fn all_pass(&self) -> bool {
        self.checks().iter().all(|(_, c)| c.passed)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks()
            .iter()
            .filter(|(_, c)| !c.passed)
            .map(|(name, c)| format!("{name}: {}", c.detail))
            .collect()
    }
}

pub fn validate_assumption3(wm: &WeightMatrix) -> Assumption3Report {
    let m = &wm.matrix;
    let t = &wm.topology;
    let n = t.node_count();

    let worst = |sums: Vec<f64>| {
        sums.into_iter()
            .enumerate()
            .map(|(i, s)| (i, (s - 1.0).abs()))
            .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
    };
    let (ri, rerr) = worst(m.row_sums());
    let row_sums = Check::new(
        rerr <= STOCHASTIC_TOL,
        format!("max |row sum − 1| = {rerr:e} at row {ri}"),
    );
    let (ci, cerr) = worst(m.column_sums());
    let column_sums = Check::new(
        cerr <= STOCHASTIC_TOL,
        format!("max |column sum − 1| = {cerr:e} at column {ci}"),
    );

    let bad_diag: Vec<usize> = (0..n).filter(|&i| m[(i, i)] <= 0.0).collect();
    let positive_diagonal = Check::new(
        bad_diag.is_empty(),
        if bad_diag.is_empty() {
            "all diagonal entries positive".into()
        } else {
            format!("non-positive diagonal at {bad_diag:?}")
        },
    );

    let mut mismatches = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = m[(i, j)];
            if v < 0.0 {
                negatives.push((i, j));
            }
            if (v > 0.0) != t.has_edge(i, j) {
                mismatches.push((i, j));
            }
        }
    }
    let support_matches_topology = Check::new(
        mismatches.is_empty() && negatives.is_empty(),
        if mismatches.is_empty() && negatives.is_empty() {
            "positive off-diagonal entries coincide with edges".into()
        } else {
            format!("support mismatches at {mismatches:?}, negative entries at {negatives:?}")
        },
    );

    let mut adj = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && m[(i, j)] > 0.0 {
                adj[i].push(j);
            }
        }
    }
    let weight_graph_connected = is_connected(n, &adj);
    let mixing = n <= 1 || wm.sigma2 < 1.0 - SIGMA_TOL;
    let connected = Check::new(
        t.is_connected() && weight_graph_connected && mixing,
        format!(
            "topology connected: {}, weight graph connected: {weight_graph_connected}, σ₂ = {}",
            t.is_connected(),
            wm.sigma2
        ),
    );

    Assumption3Report {
        row_sums,
        column_sums,
        positive_diagonal,
        support_matches_topology,
        connected,
        sigma2: wm.sigma2,
    }
}

/// σ = max(σ_W, σ_V), the slower of the two mixing rates. Must be below 1.
pub fn sigma_pair(w: &WeightMatrix, v: &WeightMatrix) -> Result<f64, NetworkError> {
    let sigma = w.sigma2.max(v.sigma2);
    if sigma >= 1.0 - SIGMA_TOL {
        return Err(NetworkError::NotMixing(sigma));
    }
    Ok(sigma)
}
