//! Communication graph, consensus weight matrix and scalar reward gossip.
//!
//! Devices exchange only their scalar local reward with graph neighbours.
//! Each gossip round replaces every value by the weighted average
//! `x_i <- sum_j l_ij x_j` over the closed neighbourhood of `i`. With a
//! doubly stochastic weight matrix the network mean is invariant and the
//! disagreement contracts geometrically at rate `lambda_2(L)`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// Tolerance for the doubly stochastic check.
pub const STOCHASTIC_TOL: f64 = 1e-12;
/// Eigenvalue moduli below this are treated as zero; above `1 - SPECTRAL_TOL` as one.
pub const SPECTRAL_TOL: f64 = 1e-9;
/// Bounded retries for a connected Watts-Strogatz draw.
pub const WS_MAX_ATTEMPTS: usize = 64;

/// Undirected simple graph stored as a symmetric boolean adjacency matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Graph {
    adjacency: Vec<Vec<bool>>,
}

impl Graph {
    pub fn empty(n: usize) -> Self {
        Self {
            adjacency: vec![vec![false; n]; n],
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Self {
        let mut g = Self::empty(n);
        for &(a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    /// Ring lattice: node `i` links to its `k` nearest nodes on each side.
    /// Duplicate links collapse, so small rings degenerate gracefully
    /// (n = 2 gives a single edge, 2k >= n - 1 gives the complete graph).
    pub fn ring_lattice(n: usize, k: usize) -> Self {
        let mut g = Self::empty(n);
        for i in 0..n {
            for j in 1..=k {
                g.add_edge(i, (i + j) % n);
            }
        }
        g
    }

    pub fn complete(n: usize) -> Self {
        let mut g = Self::empty(n);
        for i in 0..n {
            for j in (i + 1)..n {
                g.add_edge(i, j);
            }
        }
        g
    }

    pub fn path(n: usize) -> Self {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Self::from_edges(n, &edges)
    }

    pub fn n(&self) -> usize {
        self.adjacency.len()
    }

    /// Self-loops are ignored.
    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a != b {
            self.adjacency[a][b] = true;
            self.adjacency[b][a] = true;
        }
    }

    pub fn remove_edge(&mut self, a: usize, b: usize) {
        self.adjacency[a][b] = false;
        self.adjacency[b][a] = false;
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].iter().filter(|&&e| e).count()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[i]
            .iter()
            .enumerate()
            .filter_map(|(j, &e)| e.then_some(j))
    }

    pub fn edge_count(&self) -> usize {
        (0..self.n()).map(|i| self.degree(i)).sum::<usize>() / 2
    }

    pub fn adjacency(&self) -> &[Vec<bool>] {
        &self.adjacency
    }

    pub fn is_connected(&self) -> bool {
        let n = self.n();
        if n == 0 {
            return false;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for v in self.neighbors(u) {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Watts-Strogatz small-world graph.
///
/// Starts from the ring lattice with `neighbors_per_side` links on each side
/// and rewires each lattice edge `(u, u + j)` with probability `rewire_prob`
/// to a uniformly chosen node that is neither `u` nor already adjacent to it.
/// A disconnected draw is retried with the next seed, at most
/// [`WS_MAX_ATTEMPTS`] times.
pub fn build_ws_graph(
    n: usize,
    neighbors_per_side: usize,
    rewire_prob: f64,
    seed: u64,
) -> Result<Graph> {
    if n < 2 {
        return Err(Error::config("n_devices", "need at least 2 devices"));
    }
    if neighbors_per_side == 0 || neighbors_per_side >= n {
        return Err(Error::config(
            "neighbors_per_side",
            format!("must be in 1..{n}, got {neighbors_per_side}"),
        ));
    }
    if !(0.0..=1.0).contains(&rewire_prob) {
        return Err(Error::config("rewire_prob", "must lie in [0, 1]"));
    }
    for attempt in 0..WS_MAX_ATTEMPTS {
        let g = ws_draw(n, neighbors_per_side, rewire_prob, seed.wrapping_add(attempt as u64));
        if g.is_connected() {
            return Ok(g);
        }
    }
    Err(Error::Disconnected {
        attempts: WS_MAX_ATTEMPTS,
    })
}

fn ws_draw(n: usize, k: usize, p: f64, seed: u64) -> Graph {
    let mut g = Graph::ring_lattice(n, k);
    if p == 0.0 {
        return g;
    }
    let mut rng = rng_from(seed);
    for j in 1..=k {
        for u in 0..n {
            let v = (u + j) % n;
            if !g.has_edge(u, v) || !rng.random_bool(p) {
                continue;
            }
            let candidates: Vec<usize> = (0..n).filter(|&w| w != u && !g.has_edge(u, w)).collect();
            if candidates.is_empty() {
                continue;
            }
            let w = candidates[rng.random_range(0..candidates.len())];
            g.remove_edge(u, v);
            g.add_edge(u, w);
        }
    }
    g
}

/// How consensus weights are assigned to graph links.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightRule {
    /// `l_ij = 1 / (|N_i| + 1)` for neighbours, remainder on the diagonal.
    /// Doubly stochastic only on regular graphs.
    #[default]
    EqualNeighbor,
    /// `l_ij = 1 / (1 + max(deg_i, deg_j))`; doubly stochastic on any graph.
    Metropolis,
}

/// Builds and validates the consensus weight matrix for `graph`.
pub fn consensus_matrix(graph: &Graph, rule: WeightRule) -> Result<DMatrix<f64>> {
    if !graph.is_connected() {
        return Err(Error::Disconnected { attempts: 1 });
    }
    let n = graph.n();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let deg_i = graph.degree(i);
        let mut off = 0.0;
        for j in graph.neighbors(i) {
            let w = match rule {
                WeightRule::EqualNeighbor => 1.0 / (deg_i as f64 + 1.0),
                WeightRule::Metropolis => 1.0 / (1.0 + deg_i.max(graph.degree(j)) as f64),
            };
            l[(i, j)] = w;
            off += w;
        }
        l[(i, i)] = 1.0 - off;
    }
    validate_doubly_stochastic(&l, graph)?;
    Ok(l)
}

/// Checks row and column sums, support on the closed neighbourhoods, and
/// returns the minimum positive weight `nu`.
pub fn validate_doubly_stochastic(l: &DMatrix<f64>, graph: &Graph) -> Result<f64> {
    let n = graph.n();
    if l.nrows() != n || l.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: l.nrows(),
        });
    }
    // Report the worst row or column.
    let sums = (0..n)
        .map(|i| ("row", i, l.row(i).sum()))
        .chain((0..n).map(|i| ("column", i, l.column(i).sum())));
    let worst = sums.max_by(|a, b| (a.2 - 1.0).abs().total_cmp(&(b.2 - 1.0).abs()));
    if let Some((axis, index, sum)) = worst {
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::NotDoublyStochastic { axis, index, sum });
        }
    }
    let mut nu = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let w = l[(i, j)];
            let allowed = i == j || graph.has_edge(i, j);
            if w < -STOCHASTIC_TOL || (!allowed && w.abs() > STOCHASTIC_TOL) {
                return Err(Error::WeightSupport { row: i, col: j });
            }
            if allowed {
                nu = nu.min(w);
            }
        }
    }
    if nu <= 0.0 {
        return Err(Error::config(
            "weight_rule",
            format!("minimum consensus weight must be positive, got {nu}"),
        ));
    }
    Ok(nu)
}

/// Second-largest eigenvalue modulus of `l`.
pub fn second_eigenvalue_modulus(l: &DMatrix<f64>) -> f64 {
    let n = l.nrows();
    if n < 2 {
        return 0.0;
    }
    let symmetric = (0..n).all(|i| (0..i).all(|j| (l[(i, j)] - l[(j, i)]).abs() <= STOCHASTIC_TOL));
    let mut moduli: Vec<f64> = if symmetric {
        l.clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .map(|v| v.abs())
            .collect()
    } else {
        l.complex_eigenvalues().iter().map(|c| c.norm()).collect()
    };
    moduli.sort_by(|a, b| b.total_cmp(a));
    let lambda2 = moduli[1];
    if lambda2 < SPECTRAL_TOL {
        0.0
    } else {
        lambda2
    }
}

/// Number of gossip rounds reaching normalized RMSE `eps`:
/// `ceil(0.5 ln(1/eps) / ln(1/lambda_2))`, clamped to at least one round
/// when `lambda_2 = 0`, and zero when `eps = 1`.
pub fn rounds_for_accuracy(l: &DMatrix<f64>, eps: f64) -> Result<usize> {
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::config("consensus_eps", "must lie in (0, 1]"));
    }
    if eps == 1.0 {
        return Ok(0);
    }
    let lambda2 = second_eigenvalue_modulus(l);
    rounds_for_lambda(lambda2, eps)
}

pub fn rounds_for_lambda(lambda2: f64, eps: f64) -> Result<usize> {
    if eps == 1.0 {
        return Ok(0);
    }
    if lambda2 >= 1.0 - SPECTRAL_TOL {
        return Err(Error::NoSpectralGap { lambda2 });
    }
    if lambda2 < SPECTRAL_TOL {
        return Ok(1);
    }
    let g = (0.5 * (1.0 / eps).ln() / (1.0 / lambda2).ln()).ceil();
    Ok((g as usize).max(1))
}

/// How many gossip rounds to run per learning step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundsSpec {
    Fixed(usize),
    Accuracy(f64),
}

/// Everything the topology section of an experiment config specifies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub n: usize,
    pub neighbors_per_side: usize,
    pub rewire_prob: f64,
    pub seed: u64,
    pub rounds: RoundsSpec,
    pub weight_rule: WeightRule,
}

/// Validated communication graph with its consensus weights.
#[derive(Debug, Clone)]
pub struct ConsensusTopology {
    graph: Graph,
    weights: DMatrix<f64>,
    /// Closed-neighbourhood weights per row, `(j, l_ij)`, for sparse gossip.
    rows: Vec<Vec<(usize, f64)>>,
    rounds: usize,
    min_weight: f64,
    lambda2: f64,
}

impl ConsensusTopology {
    pub fn build(cfg: &TopologyConfig) -> Result<Self> {
        let graph = build_ws_graph(cfg.n, cfg.neighbors_per_side, cfg.rewire_prob, cfg.seed)?;
        Self::from_graph(graph, cfg.weight_rule, cfg.rounds)
    }

    pub fn from_graph(graph: Graph, rule: WeightRule, rounds: RoundsSpec) -> Result<Self> {
        let weights = consensus_matrix(&graph, rule)?;
        let min_weight = validate_doubly_stochastic(&weights, &graph)?;
        let lambda2 = second_eigenvalue_modulus(&weights);
        let rounds = match rounds {
            RoundsSpec::Fixed(g) => g,
            RoundsSpec::Accuracy(eps) => {
                if !(eps > 0.0 && eps <= 1.0) {
                    return Err(Error::config("consensus_eps", "must lie in (0, 1]"));
                }
                rounds_for_lambda(lambda2, eps)?
            }
        };
        let n = graph.n();
        let rows = (0..n)
            .map(|i| {
                (0..n)
                    .filter(|&j| weights[(i, j)] != 0.0)
                    .map(|j| (j, weights[(i, j)]))
                    .collect()
            })
            .collect();
        Ok(Self {
            graph,
            weights,
            rows,
            rounds,
            min_weight,
            lambda2,
        })
    }

    pub fn n_devices(&self) -> usize {
        self.graph.n()
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn min_weight(&self) -> f64 {
        self.min_weight
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    /// Runs `rounds` synchronous gossip rounds: the result is `L^rounds * values`.
    pub fn gossip(&self, values: &[f64], rounds: usize) -> Result<Vec<f64>> {
        let n = self.n_devices();
        if values.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: values.len(),
            });
        }
        let mut cur = values.to_vec();
        let mut next = vec![0.0; n];
        for _ in 0..rounds {
            for (out, row) in next.iter_mut().zip(&self.rows) {
                *out = row.iter().map(|&(j, w)| w * cur[j]).sum();
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Gossip with the topology's configured round count.
    pub fn average(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.gossip(values, self.rounds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(n: usize) -> ConsensusTopology {
        ConsensusTopology::from_graph(Graph::ring_lattice(n, 1), WeightRule::EqualNeighbor, RoundsSpec::Fixed(3))
            .unwrap()
    }

    #[test]
    fn ring_of_four_is_a_cycle() {
        let g = build_ws_graph(4, 1, 0.0, 99).unwrap();
        assert!((0..4).all(|i| g.degree(i) == 2));
        assert!(g.has_edge(0, 1) && g.has_edge(1, 2) && g.has_edge(2, 3) && g.has_edge(3, 0));
        assert!(!g.has_edge(0, 2));
    }

    #[test]
    fn ring_of_two_is_one_edge() {
        let g = build_ws_graph(2, 1, 0.0, 0).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!((g.degree(0), g.degree(1)), (1, 1));
    }

    #[test]
    fn ring_of_six() {
        let g = build_ws_graph(6, 1, 0.0, 3).unwrap();
        assert!(g.is_connected());
        assert!((0..6).all(|i| g.degree(i) == 2));
        for i in 0..6 {
            assert!(g.has_edge(i, (i + 1) % 6));
        }
    }

    #[test]
    fn rewired_graphs_stay_connected() {
        for seed in 0..50 {
            let g = build_ws_graph(12, 2, 0.4, seed).unwrap();
            assert!(g.is_connected());
            assert_eq!(g.edge_count(), 24);
        }
    }

    #[test]
    fn bad_ws_parameters() {
        assert!(build_ws_graph(1, 1, 0.0, 0).is_err());
        assert!(build_ws_graph(4, 0, 0.0, 0).is_err());
        assert!(build_ws_graph(4, 1, 1.5, 0).is_err());
    }

    #[test]
    fn four_cycle_weights() {
        let l = consensus_matrix(&Graph::ring_lattice(4, 1), WeightRule::EqualNeighbor).unwrap();
        for i in 0..4 {
            assert!((l[(i, i)] - 1.0 / 3.0).abs() < 1e-15);
            assert!((l[(i, (i + 1) % 4)] - 1.0 / 3.0).abs() < 1e-15);
            assert!((l[(i, (i + 3) % 4)] - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(l[(i, (i + 2) % 4)], 0.0);
        }
    }

    #[test]
    fn single_edge_weights() {
        let l = consensus_matrix(&Graph::ring_lattice(2, 1), WeightRule::EqualNeighbor).unwrap();
        assert!(l.iter().all(|&w| (w - 0.5).abs() < 1e-15));
    }

    #[test]
    fn path_rejected_under_equal_rule() {
        let err = consensus_matrix(&Graph::path(3), WeightRule::EqualNeighbor).unwrap_err();
        match err {
            Error::NotDoublyStochastic { axis, index, sum } => {
                assert_eq!(axis, "column");
                // Column of the centre node: 1/2 + 1/3 + 1/2.
                assert_eq!(index, 1);
                assert!((sum - (0.5 + 1.0 / 3.0 + 0.5)).abs() < 1e-12);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn path_accepted_under_metropolis() {
        let l = consensus_matrix(&Graph::path(3), WeightRule::Metropolis).unwrap();
        let nu = validate_doubly_stochastic(&l, &Graph::path(3)).unwrap();
        assert!(nu > 0.0);
    }

    #[test]
    fn disconnected_rejected() {
        let g = Graph::from_edges(4, &[(0, 1), (2, 3)]);
        assert!(matches!(
            consensus_matrix(&g, WeightRule::Metropolis),
            Err(Error::Disconnected { .. })
        ));
    }

    #[test]
    fn gossip_single_round_on_cycle() {
        let t = cycle(4);
        let out = t.gossip(&[1.0, 0.0, 0.0, 0.0], 1).unwrap();
        let third = 1.0 / 3.0;
        let expect = [third, third, 0.0, third];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn gossip_fixed_point_and_limit() {
        let t = cycle(4);
        let out = t.gossip(&[2.5; 4], 17).unwrap();
        assert!(out.iter().all(|&v| (v - 2.5).abs() < 1e-14));
        let out = t.gossip(&[1.0, 0.0, 0.0, 0.0], 200).unwrap();
        assert!(out.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn gossip_zero_rounds_is_identity() {
        let t = cycle(4);
        let x = [0.3, -1.0, 4.0, 2.0];
        assert_eq!(t.gossip(&x, 0).unwrap(), x.to_vec());
    }

    #[test]
    fn gossip_dimension_checked() {
        assert!(matches!(cycle(4).gossip(&[1.0; 3], 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn lambda2_of_cycles() {
        let t = cycle(4);
        assert!((t.lambda2() - 1.0 / 3.0).abs() < 1e-9);
        // Circulant eigenvalues (1 + 2cos(2 pi k / 8)) / 3, largest non-unit modulus at k = 1.
        let t8 = cycle(8);
        let expect = (1.0 + 2.0 * (std::f64::consts::PI / 4.0).cos()) / 3.0;
        assert!((t8.lambda2() - expect).abs() < 1e-9);
    }

    #[test]
    fn rounds_examples() {
        let l4 = consensus_matrix(&Graph::ring_lattice(4, 1), WeightRule::EqualNeighbor).unwrap();
        assert_eq!(rounds_for_accuracy(&l4, 1.0).unwrap(), 0);
        assert_eq!(rounds_for_accuracy(&l4, 0.005).unwrap(), 3);
        let l2 = consensus_matrix(&Graph::ring_lattice(2, 1), WeightRule::EqualNeighbor).unwrap();
        assert_eq!(second_eigenvalue_modulus(&l2), 0.0);
        assert_eq!(rounds_for_accuracy(&l2, 0.005).unwrap(), 1);
        assert!(rounds_for_accuracy(&l4, 0.0).is_err());
        assert!(rounds_for_accuracy(&l4, 1.5).is_err());
    }

    #[test]
    fn identity_matrix_has_no_gap() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(rounds_for_accuracy(&id, 0.01), Err(Error::NoSpectralGap { .. })));
    }

    #[test]
    fn complete_graph_one_round_is_exact_mean() {
        let t = ConsensusTopology::from_graph(Graph::complete(5), WeightRule::EqualNeighbor, RoundsSpec::Accuracy(0.005))
            .unwrap();
        assert_eq!(t.rounds(), 1);
        let x = [1.0, 2.0, 3.0, 4.0, 10.0];
        let out = t.average(&x).unwrap();
        assert!(out.iter().all(|&v| (v - 4.0).abs() < 1e-12));
    }
}
