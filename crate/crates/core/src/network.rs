//! Time-varying communication graphs among population coordinators.
//!
//! `W^k[l][l']` is the weight coordinator `l` puts on the value received from
//! `l'` at step `k`; a positive entry is a directed edge `l' -> l`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::Matrix;
use crate::report::ValidationReport;

/// Default lower bound on diagonal and positive weights.
pub const DEFAULT_MU: f64 = 0.05;

/// Tolerance for row and column sums.
pub const STOCHASTIC_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEdge {
    pub from: usize,
    pub to: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphGenerator {
    /// Fixed undirected edge set with Metropolis weights.
    Static { edges: Vec<(usize, usize)> },
    /// Ring gossip: at step `k` the ring edges `{j, j+1 mod L}` with
    /// `j = k mod period` are active (`period = 1` is the full ring).
    RingRotation { period: usize },
    /// Fresh Erdős–Rényi edges per step plus the rotating ring edge
    /// `{k mod L, k+1 mod L}`, so any `L` consecutive steps are connected.
    RandomUndirected { edge_probability: f64, seed: u64 },
    /// Explicit per-step weighted (possibly directed) edges, repeated
    /// cyclically. Missing diagonal entries absorb `1 - row sum`.
    Custom { steps: Vec<Vec<WeightedEdge>> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSequence {
    pub num_nodes: usize,
    pub generator: GraphGenerator,
}

impl GraphSequence {
    pub fn new(num_nodes: usize, generator: GraphGenerator) -> Result<Self> {
        if num_nodes == 0 {
            return Err(Error::Graph("graph needs at least one node".into()));
        }
        match &generator {
            GraphGenerator::Static { edges } => check_edges(edges, num_nodes)?,
            GraphGenerator::RingRotation { period } => {
                if *period == 0 {
                    return Err(Error::Graph("ring rotation period must be >= 1".into()));
                }
            }
            GraphGenerator::RandomUndirected { edge_probability, .. } => {
                if !(0.0..=1.0).contains(edge_probability) {
                    return Err(Error::Graph(format!(
                        "edge probability {edge_probability} not in [0, 1]"
                    )));
                }
            }
            GraphGenerator::Custom { steps } => {
                if steps.is_empty() {
                    return Err(Error::Graph("custom sequence has no steps".into()));
                }
                for e in steps.iter().flatten() {
                    if e.from >= num_nodes || e.to >= num_nodes {
                        return Err(Error::Graph(format!("edge {}->{} out of range", e.from, e.to)));
                    }
                    if !e.weight.is_finite() || e.weight < 0.0 {
                        return Err(Error::Graph(format!(
                            "edge {}->{} has weight {}",
                            e.from, e.to, e.weight
                        )));
                    }
                }
            }
        }
        Ok(GraphSequence { num_nodes, generator })
    }

    /// Single node talking only to itself.
    pub fn singleton() -> Self {
        GraphSequence {
            num_nodes: 1,
            generator: GraphGenerator::Static { edges: vec![] },
        }
    }

    pub fn path(num_nodes: usize) -> Self {
        let edges = (1..num_nodes).map(|i| (i - 1, i)).collect();
        GraphSequence {
            num_nodes,
            generator: GraphGenerator::Static { edges },
        }
    }

    pub fn complete(num_nodes: usize) -> Self {
        let edges = (0..num_nodes)
            .flat_map(|i| ((i + 1)..num_nodes).map(move |j| (i, j)))
            .collect();
        GraphSequence {
            num_nodes,
            generator: GraphGenerator::Static { edges },
        }
    }

    pub fn ring_rotation(num_nodes: usize, period: usize) -> Result<Self> {
        Self::new(num_nodes, GraphGenerator::RingRotation { period })
    }

    pub fn random_undirected(num_nodes: usize, edge_probability: f64, seed: u64) -> Result<Self> {
        Self::new(num_nodes, GraphGenerator::RandomUndirected { edge_probability, seed })
    }

    /// Weight matrix used at step `k`.
    pub fn weights(&self, k: usize) -> Matrix {
        let l = self.num_nodes;
        match &self.generator {
            GraphGenerator::Static { edges } => metropolis_unchecked(edges, l),
            GraphGenerator::RingRotation { period } => metropolis_unchecked(&ring_edges(l, *period, k), l),
            GraphGenerator::RandomUndirected { edge_probability, seed } => {
                metropolis_unchecked(&random_edges(l, *edge_probability, *seed, k), l)
            }
            GraphGenerator::Custom { steps } => custom_weights(&steps[k % steps.len()], l),
        }
    }

    /// Reads a custom sequence: a JSON list of steps, each a list of
    /// `{from, to, weight}` objects. Unless `allow_invalid` is set, the
    /// sequence must pass [`validate_sequence`] over one full cycle.
    pub fn from_json_file(path: &Path, num_nodes: usize, allow_invalid: bool) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, num_nodes, allow_invalid)
    }

    pub fn from_json_str(text: &str, num_nodes: usize, allow_invalid: bool) -> Result<Self> {
        let steps: Vec<Vec<WeightedEdge>> = serde_json::from_str(text)?;
        let len = steps.len();
        let seq = Self::new(num_nodes, GraphGenerator::Custom { steps })?;
        if !allow_invalid {
            let horizon = len.max(num_nodes);
            let window = num_nodes.min(horizon).max(1);
            let report = validate_sequence(&seq, horizon, DEFAULT_MU, window);
            if !report.passed() {
                return Err(Error::Graph(format!("custom sequence fails validation:\n{report}")));
            }
        }
        Ok(seq)
    }
}

fn check_edges(edges: &[(usize, usize)], l: usize) -> Result<()> {
    for &(a, b) in edges {
        if a == b {
            return Err(Error::InvalidArgument(format!("self-loop at node {a}")));
        }
        if a >= l || b >= l {
            return Err(Error::InvalidArgument(format!(
                "edge ({a}, {b}) out of range for {l} nodes"
            )));
        }
    }
    Ok(())
}

fn ring_edges(l: usize, period: usize, k: usize) -> Vec<(usize, usize)> {
    if l < 2 {
        return vec![];
    }
    let count = if l == 2 { 1 } else { l };
    (0..count)
        .filter(|j| j % period == k % period)
        .map(|j| (j, (j + 1) % l))
        .collect()
}

fn random_edges(l: usize, p: f64, seed: u64, k: usize) -> Vec<(usize, usize)> {
    if l < 2 {
        return vec![];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let anchor = (k % l, (k + 1) % l);
    let mut edges = vec![anchor];
    for i in 0..l {
        for j in (i + 1)..l {
            let draw: f64 = rng.gen();
            let is_anchor = (i, j) == anchor || (j, i) == anchor;
            if draw < p && !is_anchor {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Metropolis weights `1 / (1 + max(deg_l, deg_l'))` on each undirected
/// edge, diagonal absorbing the remainder. Duplicate edges count once.
pub fn metropolis_weights(undirected_edges: &[(usize, usize)], num_nodes: usize) -> Result<Matrix> {
    check_edges(undirected_edges, num_nodes)?;
    Ok(metropolis_unchecked(undirected_edges, num_nodes))
}

fn metropolis_unchecked(edges: &[(usize, usize)], l: usize) -> Matrix {
    let mut adj = vec![vec![false; l]; l];
    for &(a, b) in edges {
        adj[a][b] = true;
        adj[b][a] = true;
    }
    let deg: Vec<usize> = adj.iter().map(|r| r.iter().filter(|x| **x).count()).collect();
    let mut w = Matrix::zeros(l, l);
    for i in 0..l {
        for j in 0..l {
            if adj[i][j] {
                w[(i, j)] = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
            }
        }
    }
    for i in 0..l {
        let off: f64 = (0..l).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

fn custom_weights(edges: &[WeightedEdge], l: usize) -> Matrix {
    let mut w = Matrix::zeros(l, l);
    let mut has_diag = vec![false; l];
    for e in edges {
        // from -> to: node `to` weighs the value received from `from`.
        w[(e.to, e.from)] = e.weight;
        if e.from == e.to {
            has_diag[e.to] = true;
        }
    }
    for i in 0..l {
        if !has_diag[i] {
            let off: f64 = (0..l).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
            w[(i, i)] = 1.0 - off;
        }
    }
    w
}

/// Ordered product `W^{k_to} W^{k_to - 1} ... W^{k_from}`; a single step
/// when `k_from == k_to`.
pub fn transition_product(seq: &GraphSequence, k_from: usize, k_to: usize) -> Result<Matrix> {
    if k_from > k_to {
        return Err(Error::InvalidArgument(format!("k_from = {k_from} > k_to = {k_to}")));
    }
    let mut phi = seq.weights(k_from);
    for k in (k_from + 1)..=k_to {
        phi = seq.weights(k) * phi;
    }
    Ok(phi)
}

/// Largest `|phi[l][l'] - 1/L|`.
pub fn mixing_deviation(phi: &Matrix) -> f64 {
    let target = 1.0 / phi.nrows() as f64;
    phi.iter().map(|v| (v - target).abs()).fold(0.0, f64::max)
}

fn strongly_connected(adj: &[Vec<bool>]) -> bool {
    let l = adj.len();
    if l <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; l];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in 0..l {
                let edge = if forward { adj[u][v] } else { adj[v][u] };
                if edge && !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Checks double stochasticity, the `mu` weight floor, and strong
/// connectivity of the edge union over every window of `window`
/// consecutive steps in `[0, horizon)`.
pub fn validate_sequence(seq: &GraphSequence, horizon: usize, mu: f64, window: usize) -> ValidationReport {
    let mut report = ValidationReport::new("graph sequence");
    if window == 0 || horizon < window {
        report.check(
            "arguments",
            false,
            format!("need horizon >= window >= 1, got {horizon}, {window}"),
        );
        return report;
    }
    let l = seq.num_nodes;
    let mut stochastic_fail = None;
    let mut mu_fail = None;
    let mut edges_per_step = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let w = seq.weights(k);
        if stochastic_fail.is_none() {
            let row = (0..l).map(|i| (w.row(i).sum() - 1.0).abs()).fold(0.0, f64::max);
            let col = (0..l).map(|j| (w.column(j).sum() - 1.0).abs()).fold(0.0, f64::max);
            let neg = w.iter().any(|v| *v < 0.0);
            if row > STOCHASTIC_TOLERANCE || col > STOCHASTIC_TOLERANCE || neg {
                stochastic_fail = Some(format!("step {k}: row error {row:.2e}, column error {col:.2e}"));
            }
        }
        if mu_fail.is_none() {
            let diag_ok = (0..l).all(|i| w[(i, i)] >= mu);
            let pos_ok = w.iter().all(|v| *v == 0.0 || *v >= mu);
            if !(diag_ok && pos_ok) {
                mu_fail = Some(format!("step {k}: a diagonal or positive weight is below {mu}"));
            }
        }
        let mut adj = vec![vec![false; l]; l];
        for i in 0..l {
            for j in 0..l {
                if i != j && w[(i, j)] > 0.0 {
                    adj[j][i] = true;
                }
            }
        }
        edges_per_step.push(adj);
    }
    report.check(
        "doubly stochastic",
        stochastic_fail.is_none(),
        stochastic_fail.unwrap_or_else(|| format!("all {horizon} steps within {STOCHASTIC_TOLERANCE:e}")),
    );
    report.check(
        "weight floor",
        mu_fail.is_none(),
        mu_fail.unwrap_or_else(|| format!("all weights >= {mu}")),
    );

    let mut first_bad = None;
    for start in 0..=(horizon - window) {
        let mut union = vec![vec![false; l]; l];
        for adj in &edges_per_step[start..start + window] {
            for i in 0..l {
                for j in 0..l {
                    union[i][j] |= adj[i][j];
                }
            }
        }
        if !strongly_connected(&union) {
            first_bad = Some(start);
            break;
        }
    }
    report.check(
        "windowed strong connectivity",
        first_bad.is_none(),
        match first_bad {
            Some(s) => format!("union over steps [{s}, {}) is not strongly connected", s + window),
            None => format!("every window of {window} steps is strongly connected"),
        },
    );
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn metropolis_pair() {
        let w = metropolis_weights(&[(0, 1)], 2).unwrap();
        assert_eq!(w, Matrix::from_element(2, 2, 0.5));
    }

    #[test]
    fn metropolis_path_of_three() {
        let w = metropolis_weights(&[(0, 1), (1, 2)], 3).unwrap();
        assert_abs_diff_eq!(w[(0, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(1, 2)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(1, 1)], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(w[(2, 2)], 2.0 / 3.0, epsilon = 1e-15);
        assert_eq!(w[(0, 2)], 0.0);
    }

    #[test]
    fn metropolis_empty_is_identity() {
        assert_eq!(metropolis_weights(&[], 4).unwrap(), Matrix::identity(4, 4));
    }

    #[test]
    fn metropolis_rejects_self_loops() {
        assert!(metropolis_weights(&[(1, 1)], 3).is_err());
    }

    #[test]
    fn complete_graph_passes_any_window() {
        let seq = GraphSequence::complete(6);
        for window in [1, 3, 6] {
            assert!(validate_sequence(&seq, 20, DEFAULT_MU, window).passed());
        }
    }

    #[test]
    fn single_edge_ring_passes_with_window_l() {
        let seq = GraphSequence::ring_rotation(10, 10).unwrap();
        let report = validate_sequence(&seq, 100, DEFAULT_MU, 10);
        assert!(report.passed(), "{report}");
        // L - 1 consecutive ring edges form a spanning path; L - 2 do not.
        assert!(validate_sequence(&seq, 100, DEFAULT_MU, 9).passed());
        assert!(!validate_sequence(&seq, 100, DEFAULT_MU, 8).passed());
    }

    #[test]
    fn unbalanced_directed_step_is_not_doubly_stochastic() {
        let steps = vec![vec![WeightedEdge {
            from: 0,
            to: 1,
            weight: 0.5,
        }]];
        let seq = GraphSequence::new(2, GraphGenerator::Custom { steps }).unwrap();
        let report = validate_sequence(&seq, 4, DEFAULT_MU, 2);
        assert!(!report.get("doubly stochastic").unwrap().passed);
    }

    #[test]
    fn disconnected_graph_fails_connectivity() {
        let seq = GraphSequence::new(
            4,
            GraphGenerator::Static {
                edges: vec![(0, 1), (2, 3)],
            },
        )
        .unwrap();
        for window in [1, 2, 4] {
            let r = validate_sequence(&seq, 8, DEFAULT_MU, window);
            assert!(!r.get("windowed strong connectivity").unwrap().passed);
            assert!(r.get("doubly stochastic").unwrap().passed);
        }
    }

    #[test]
    fn transition_product_conventions() {
        let seq = GraphSequence::path(4);
        assert_eq!(transition_product(&seq, 3, 3).unwrap(), seq.weights(3));
        let complete = GraphSequence::complete(5);
        let phi = transition_product(&complete, 0, 0).unwrap();
        assert!(mixing_deviation(&phi) <= 1e-15);
        assert!(transition_product(&seq, 2, 1).is_err());
    }

    #[test]
    fn path_metropolis_mixes_in_fifty_steps() {
        // Oracle: W is symmetric, so W^50 - J/L = sum over the non-unit
        // eigenpairs of mu^50 v v'.
        for l in [3, 4] {
            let seq = GraphSequence::path(l);
            let phi = transition_product(&seq, 0, 49).unwrap();
            let eig = nalgebra::SymmetricEigen::new(seq.weights(0));
            let mut expected = Matrix::zeros(l, l);
            for (j, mu) in eig.eigenvalues.iter().enumerate() {
                if (mu - 1.0).abs() > 1e-9 {
                    let v = eig.eigenvectors.column(j);
                    expected += v * v.transpose() * mu.powi(50);
                }
            }
            let oracle = expected.abs().max();
            assert!((mixing_deviation(&phi) - oracle).abs() < 1e-12);
        }
        let phi = transition_product(&GraphSequence::path(3), 0, 49).unwrap();
        assert!(mixing_deviation(&phi) < 1e-6, "{}", mixing_deviation(&phi));
    }

    #[test]
    fn custom_json_round_trip_and_enforcement() {
        let ok = r#"[[{"from":0,"to":1,"weight":0.5},{"from":1,"to":0,"weight":0.5}]]"#;
        let seq = GraphSequence::from_json_str(ok, 2, false).unwrap();
        assert_eq!(seq.weights(7), Matrix::from_element(2, 2, 0.5));
        let bad = r#"[[{"from":0,"to":1,"weight":0.5}]]"#;
        assert!(GraphSequence::from_json_str(bad, 2, false).is_err());
        assert!(GraphSequence::from_json_str(bad, 2, true).is_ok());
    }
}
