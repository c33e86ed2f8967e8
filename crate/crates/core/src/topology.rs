//! Communication graphs and their mixing matrices.
//!
//! A [`MixingMatrix`] is a symmetric, doubly-stochastic weight matrix whose
//! sparsity pattern follows a connected undirected [`Graph`] and whose spectrum
//! lies in `(-1, 1]` with a simple eigenvalue at 1. The spectral constant
//! `lambda = max(|lambda_2|, |lambda_m|)` controls how fast gossip averaging
//! forgets disagreement: `||W^k - P||_op <= lambda^k` where `P = 11^T / m`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use thiserror::Error;

use crate::rng::{Purpose, StreamKey};

/// Slack used for the strict eigenvalue inequalities of a mixing matrix.
pub const SPECTRAL_TOL: f64 = 1e-10;
/// Slack used for row/column sums and symmetry.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("mixing matrix is not symmetric: w[{i}][{j}] = {a} but w[{j}][{i}] = {b}")]
    NotSymmetric { i: usize, j: usize, a: f64, b: f64 },
    #[error("row {row} of the mixing matrix sums to {sum}, expected 1")]
    RowSum { row: usize, sum: f64 },
    #[error("mixing weight w[{i}][{j}] = {value} violates the graph sparsity pattern")]
    Sparsity { i: usize, j: usize, value: f64 },
    #[error(
        "spectral validation failed: eigenvalues lambda_1 = {lambda1}, lambda_2 = {lambda2}, \
         lambda_m = {lambda_min} (need 1 = lambda_1 > lambda_2 and lambda_m > -1)"
    )]
    Spectral {
        lambda1: f64,
        lambda2: f64,
        lambda_min: f64,
    },
    #[error("symmetric eigensolver did not converge for matrix:\n{dump}")]
    Eigen { dump: String },
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Undirected simple graph on nodes `0..m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    m: usize,
    edges: BTreeSet<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from an edge list, checking the graph invariants
    /// (`m >= 2`, no self-loops, no duplicates, connected).
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, TopologyError> {
        if m < 2 {
            return Err(TopologyError::InvalidTopology(format!("need at least 2 nodes, got {m}")));
        }
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= m || b >= m {
                return Err(TopologyError::InvalidTopology(format!(
                    "edge ({a}, {b}) references a node outside 0..{m}"
                )));
            }
            if a == b {
                return Err(TopologyError::InvalidTopology(format!("self-loop at node {a}")));
            }
            if !set.insert((a.min(b), a.max(b))) {
                return Err(TopologyError::InvalidTopology(format!("duplicate edge ({a}, {b})")));
            }
        }
        let g = Graph { m, edges: set };
        if !g.is_connected() {
            return Err(TopologyError::InvalidTopology("graph is not connected".into()));
        }
        Ok(g)
    }

    /// Ring `0 - 1 - ... - (m-1) - 0`.
    pub fn ring(m: usize) -> Result<Self, TopologyError> {
        if m < 3 {
            return Err(TopologyError::InvalidTopology(format!("a ring needs at least 3 nodes, got {m}")));
        }
        Graph::new(m, (0..m).map(|i| (i, (i + 1) % m)))
    }

    pub fn complete(m: usize) -> Result<Self, TopologyError> {
        Graph::new(m, (0..m).flat_map(|i| ((i + 1)..m).map(move |j| (i, j))))
    }

    /// Random connected graph: a random spanning tree first, then every
    /// remaining pair independently with probability `edge_prob`.
    pub fn random_connected(m: usize, edge_prob: f64, seed: u64) -> Result<Self, TopologyError> {
        if m < 2 {
            return Err(TopologyError::InvalidTopology(format!("need at least 2 nodes, got {m}")));
        }
        if !(edge_prob > 0.0 && edge_prob <= 1.0) {
            return Err(TopologyError::InvalidTopology(format!(
                "edge probability must lie in (0, 1], got {edge_prob}"
            )));
        }
        let mut rng = StreamKey::new(seed).purpose(Purpose::Topology).rng();
        let mut order: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut edges = BTreeSet::new();
        for pos in 1..m {
            let parent = order[rng.random_range(0..pos)];
            let node = order[pos];
            edges.insert((parent.min(node), parent.max(node)));
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if !edges.contains(&(i, j)) && rng.random::<f64>() < edge_prob {
                    edges.insert((i, j));
                }
            }
        }
        Graph::new(m, edges)
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as `(i, j)` with `i < j`, in lexicographic order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.m];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn neighbors(&self, node: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| match (a == node, b == node) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect()
    }

    fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(n) = queue.pop_front() {
            for &k in &adj[n] {
                if !seen[k] {
                    seen[k] = true;
                    queue.push_back(k);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Edge-list text: a `# nodes <m>` header followed by one `i j` pair
    /// per line (0-indexed).
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("# nodes {}\n", self.m);
        for (a, b) in self.edges() {
            let _ = writeln!(out, "{a} {b}");
        }
        out
    }

    /// Parses edge-list text. Without a `# nodes` header the node count is
    /// one more than the largest index seen.
    pub fn parse_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut declared = None;
        let mut edges = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(n) = comment.trim().strip_prefix("nodes") {
                    declared = Some(n.trim().parse::<usize>().map_err(|e| TopologyError::Parse {
                        line: lineno + 1,
                        msg: format!("bad node count: {e}"),
                    })?);
                }
                continue;
            }
            let mut parts = line.split_whitespace();
            let mut next = || -> Result<usize, TopologyError> {
                parts
                    .next()
                    .ok_or_else(|| TopologyError::Parse { line: lineno + 1, msg: "expected two indices".into() })?
                    .parse::<usize>()
                    .map_err(|e| TopologyError::Parse { line: lineno + 1, msg: e.to_string() })
            };
            let a = next()?;
            let b = next()?;
            edges.push((a, b));
        }
        let m = declared.unwrap_or_else(|| edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0));
        Graph::new(m, edges)
    }
}

/// Weighting rule used to turn a graph into a mixing matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingRule {
    MetropolisHastings,
    MaxDegree,
}

/// Validated mixing matrix with cached spectrum summary.
#[derive(Debug, Clone)]
pub struct MixingMatrix {
    w: DMatrix<f64>,
    lambda: f64,
    lambda2: f64,
    lambda_min: f64,
    /// Nonzero weights per row, ascending column order, self included.
    rows: Vec<Vec<(usize, f64)>>,
    /// Number of neighbours `j != i` each node transmits to.
    out_degree: Vec<usize>,
}

impl MixingMatrix {
    /// Metropolis–Hastings weights: `1 / (1 + max(deg i, deg j))` on every
    /// edge, diagonal takes the remainder of the row.
    pub fn metropolis_hastings(g: &Graph) -> Result<Self, TopologyError> {
        let deg = g.degrees();
        Self::from_edge_weights(g, |a, b| 1.0 / (1.0 + deg[a].max(deg[b]) as f64))
    }

    /// Maximum-degree weights: `1 / (1 + max_degree)` on every edge.
    pub fn max_degree(g: &Graph) -> Result<Self, TopologyError> {
        let dmax = g.degrees().into_iter().max().unwrap_or(0);
        let w = 1.0 / (1.0 + dmax as f64);
        Self::from_edge_weights(g, |_, _| w)
    }

    pub fn from_rule(g: &Graph, rule: MixingRule) -> Result<Self, TopologyError> {
        match rule {
            MixingRule::MetropolisHastings => Self::metropolis_hastings(g),
            MixingRule::MaxDegree => Self::max_degree(g),
        }
    }

    /// The averaging matrix `P = 11^T / m` with every entry exactly `1/m`.
    pub fn averaging(m: usize) -> Result<Self, TopologyError> {
        let g = Graph::complete(m)?;
        let w = DMatrix::from_element(m, m, 1.0 / m as f64);
        Self::from_dense(w, &g)
    }

    fn from_edge_weights(g: &Graph, weight: impl Fn(usize, usize) -> f64) -> Result<Self, TopologyError> {
        let m = g.node_count();
        let mut w = DMatrix::zeros(m, m);
        for (a, b) in g.edges() {
            let v = weight(a, b);
            w[(a, b)] = v;
            w[(b, a)] = v;
        }
        for i in 0..m {
            let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
        Self::from_dense(w, g)
    }

    /// Validates a dense candidate against the mixing-matrix properties for
    /// graph `g`.
    pub fn from_dense(w: DMatrix<f64>, g: &Graph) -> Result<Self, TopologyError> {
        let m = g.node_count();
        if w.nrows() != m || w.ncols() != m {
            return Err(TopologyError::InvalidTopology(format!(
                "matrix is {}x{}, graph has {m} nodes",
                w.nrows(),
                w.ncols()
            )));
        }
        for i in 0..m {
            for j in 0..m {
                let v = w[(i, j)];
                let allowed = i == j || g.has_edge(i, j);
                if (allowed && v <= 0.0) || (!allowed && v != 0.0) || !v.is_finite() {
                    return Err(TopologyError::Sparsity { i, j, value: v });
                }
                if j > i && (v - w[(j, i)]).abs() > STOCHASTIC_TOL {
                    return Err(TopologyError::NotSymmetric { i, j, a: v, b: w[(j, i)] });
                }
            }
            let sum: f64 = w.row(i).iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(TopologyError::RowSum { row: i, sum });
            }
        }
        let eig = sorted_eigenvalues(&w)?;
        let lambda1 = eig[0];
        let lambda2 = eig[1];
        let lambda_min = eig[m - 1];
        if (lambda1 - 1.0).abs() > SPECTRAL_TOL || lambda2 >= 1.0 - SPECTRAL_TOL || lambda_min <= -1.0 + SPECTRAL_TOL {
            return Err(TopologyError::Spectral { lambda1, lambda2, lambda_min });
        }
        let rows = (0..m)
            .map(|i| (0..m).filter(|&j| w[(i, j)] != 0.0).map(|j| (j, w[(i, j)])).collect())
            .collect();
        Ok(MixingMatrix {
            lambda: lambda2.abs().max(lambda_min.abs()),
            lambda2,
            lambda_min,
            rows,
            out_degree: g.degrees(),
            w,
        })
    }

    pub fn size(&self) -> usize {
        self.w.nrows()
    }

    pub fn dense(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[(i, j)]
    }

    /// `lambda = max(|lambda_2|, |lambda_m|)`.
    pub fn spectral_constant(&self) -> f64 {
        self.lambda
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn lambda_min(&self) -> f64 {
        self.lambda_min
    }

    /// Nonzero weights `(l, w_il)` of row `i`, self-weight included,
    /// ascending in `l`.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    /// Number of peers (excluding itself) node `i` sends to each round.
    pub fn out_degree(&self, i: usize) -> usize {
        self.out_degree[i]
    }

    /// Number of directed transmissions per gossip round, `2|E|`.
    pub fn transmissions_per_round(&self) -> u64 {
        self.out_degree.iter().map(|&d| d as u64).sum()
    }

    /// Reports `(k, ||W^k - P||_op, lambda^k)` for `k = 1..=k_max`.
    pub fn contraction_check(&self, k_max: usize) -> Vec<ContractionPoint> {
        let m = self.size();
        let p = DMatrix::from_element(m, m, 1.0 / m as f64);
        let mut power = DMatrix::identity(m, m);
        (1..=k_max)
            .map(|k| {
                power = &power * &self.w;
                let diff = &power - &p;
                let op_norm = diff.singular_values().max();
                ContractionPoint { k, op_norm, bound: self.lambda.powi(k as i32) }
            })
            .collect()
    }

    /// CSV dump of the dense matrix, one row per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.size() {
            let row: Vec<String> = self.w.row(i).iter().map(|v| v.to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// One line of a contraction report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionPoint {
    pub k: usize,
    pub op_norm: f64,
    pub bound: f64,
}

/// Eigenvalues of a symmetric matrix, descending.
pub fn sorted_eigenvalues(w: &DMatrix<f64>) -> Result<Vec<f64>, TopologyError> {
    let eig = SymmetricEigen::try_new(w.clone(), f64::EPSILON, 10_000).ok_or_else(|| TopologyError::Eigen {
        dump: format!("{w:.17}"),
    })?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}
