//! Communication graphs: generation, weighted Laplacians, degree features.
//!
//! Nodes are indexed `0..m`. Edges are stored once per undirected pair with
//! the smaller endpoint first, sorted lexicographically, which fixes the
//! alignment between a graph and its [`EdgeWeights`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mat::Mat;

/// Default resample budget for rejection-sampled connected graphs.
pub const DEFAULT_GEN_ATTEMPTS: usize = 10_000;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("failed to sample a connected graph within {attempts} attempts (m={m}, p={p})")]
    ResampleBudgetExhausted { m: usize, p: f64, attempts: usize },
}

/// Undirected simple graph on `m` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    m: usize,
    edges: Vec<(usize, usize)>,
}

impl Graph {
    /// Builds a graph from undirected edge pairs. Panics on self-loops,
    /// out-of-range endpoints, or duplicate edges.
    pub fn new(m: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        assert!(m >= 1, "graph needs at least one node");
        let mut normalized: Vec<(usize, usize)> = edges
            .into_iter()
            .map(|(a, b)| {
                assert!(a != b, "self-loops are not allowed");
                assert!(a < m && b < m, "edge endpoint out of range");
                (a.min(b), a.max(b))
            })
            .collect();
        normalized.sort_unstable();
        normalized.windows(2).for_each(|w| {
            assert!(w[0] != w[1], "duplicate edge {:?}", w[0]);
        });
        Self { m, edges: normalized }
    }

    pub fn node_count(&self) -> usize {
        self.m
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Edges as sorted `(i, j)` pairs with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Neighbor lists in ascending node order.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.m];
        for &(a, b) in &self.edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn degree(&self, node: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b)| a == node || b == node)
            .count()
    }
}

/// Positive weight per undirected edge, aligned with [`Graph::edges`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeWeights(Vec<f64>);

impl EdgeWeights {
    pub fn new(graph: &Graph, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            graph.edge_count(),
            "one weight per undirected edge"
        );
        assert!(values.iter().all(|&w| w > 0.0), "edge weights must be positive");
        Self(values)
    }

    /// All weights equal to one.
    pub fn unit(graph: &Graph) -> Self {
        Self(vec![1.0; graph.edge_count()])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Samples an Erdős–Rényi graph and rejects disconnected draws.
///
/// Each candidate pair `(i, j)`, `i < j`, is included independently with
/// probability `p`; candidates failing connectivity are discarded and the
/// whole graph is redrawn, up to [`DEFAULT_GEN_ATTEMPTS`] times.
pub fn erdos_renyi<R: Rng>(m: usize, p: f64, rng: &mut R) -> Result<Graph, GraphError> {
    erdos_renyi_with_budget(m, p, rng, DEFAULT_GEN_ATTEMPTS)
}

pub fn erdos_renyi_with_budget<R: Rng>(
    m: usize,
    p: f64,
    rng: &mut R,
    max_attempts: usize,
) -> Result<Graph, GraphError> {
    assert!(m >= 2, "need at least two nodes");
    assert!(p > 0.0 && p <= 1.0, "edge probability must be in (0, 1]");
    for _ in 0..max_attempts {
        let mut edges = Vec::new();
        for i in 0..m {
            for j in i + 1..m {
                if rng.random::<f64>() < p {
                    edges.push((i, j));
                }
            }
        }
        let g = Graph::new(m, edges);
        if is_connected(&g) {
            return Ok(g);
        }
    }
    Err(GraphError::ResampleBudgetExhausted {
        m,
        p,
        attempts: max_attempts,
    })
}

/// True iff a breadth-first traversal from node 0 reaches every node.
pub fn is_connected(graph: &Graph) -> bool {
    let m = graph.node_count();
    if m <= 1 {
        return true;
    }
    let adj = graph.adjacency();
    let mut seen = vec![false; m];
    let mut queue = std::collections::VecDeque::from([0usize]);
    seen[0] = true;
    let mut reached = 1;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                reached += 1;
                queue.push_back(v);
            }
        }
    }
    reached == m
}

/// Weighted Laplacian `P` with `P_ii = Σ_{j∈N(i)} e_ji` and `P_ij = -e_ij`.
pub fn weighted_laplacian(graph: &Graph, weights: &EdgeWeights) -> Mat {
    assert_eq!(weights.values().len(), graph.edge_count());
    let m = graph.node_count();
    let mut p = Mat::zeros(m, m);
    for (&(a, b), &w) in graph.edges().iter().zip(weights.values()) {
        p[(a, b)] = -w;
        p[(b, a)] = -w;
        p[(a, a)] += w;
        p[(b, b)] += w;
    }
    p
}

/// Five per-node statistics over the unweighted neighborhood degrees:
/// own degree, min, max, mean, and population variance of neighbor degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalDegreeProfile {
    pub degree: f64,
    pub min_neighbor: f64,
    pub max_neighbor: f64,
    pub mean_neighbor: f64,
    pub var_neighbor: f64,
}

impl LocalDegreeProfile {
    pub fn to_array(self) -> [f64; 5] {
        [
            self.degree,
            self.min_neighbor,
            self.max_neighbor,
            self.mean_neighbor,
            self.var_neighbor,
        ]
    }
}

pub fn local_degree_profile(graph: &Graph, node: usize) -> LocalDegreeProfile {
    assert!(node < graph.node_count(), "node out of range");
    let adj = graph.adjacency();
    let neighbors = &adj[node];
    assert!(!neighbors.is_empty(), "node {node} has no neighbors");
    let degs: Vec<f64> = neighbors.iter().map(|&j| adj[j].len() as f64).collect();
    let n = degs.len() as f64;
    let mean = degs.iter().sum::<f64>() / n;
    let var = degs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
    LocalDegreeProfile {
        degree: neighbors.len() as f64,
        min_neighbor: degs.iter().cloned().fold(f64::INFINITY, f64::min),
        max_neighbor: degs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_neighbor: mean,
        var_neighbor: var,
    }
}

/// Relabels nodes: node `i` becomes `perm[i]`. `perm` must be a bijection.
pub fn permute(graph: &Graph, weights: &EdgeWeights, perm: &[usize]) -> (Graph, EdgeWeights) {
    let m = graph.node_count();
    assert_eq!(perm.len(), m, "permutation length mismatch");
    let mut seen = vec![false; m];
    for &p in perm {
        assert!(p < m && !seen[p], "perm is not a bijection on 0..m");
        seen[p] = true;
    }
    // Relabel, renormalize each pair, then restore sorted order together
    // with the aligned weights.
    let mut pairs: Vec<((usize, usize), f64)> = graph
        .edges()
        .iter()
        .zip(weights.values())
        .map(|(&(a, b), &w)| {
            let (x, y) = (perm[a], perm[b]);
            ((x.min(y), x.max(y)), w)
        })
        .collect();
    pairs.sort_unstable_by_key(|&(e, _)| e);
    let edges: Vec<(usize, usize)> = pairs.iter().map(|&(e, _)| e).collect();
    let ws: Vec<f64> = pairs.iter().map(|&(_, w)| w).collect();
    let g = Graph::new(m, edges);
    let w = EdgeWeights::new(&g, ws);
    (g, w)
}

/// Serialization schema: edges stored once per undirected pair with `i < j`,
/// weights aligned with the edge list, 0-based indices.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphFile {
    pub m: usize,
    pub edges: Vec<[usize; 2]>,
    pub weights: Vec<f64>,
}

impl GraphFile {
    pub fn from_parts(graph: &Graph, weights: &EdgeWeights) -> Self {
        Self {
            m: graph.node_count(),
            edges: graph.edges().iter().map(|&(a, b)| [a, b]).collect(),
            weights: weights.values().to_vec(),
        }
    }

    pub fn into_parts(self) -> (Graph, EdgeWeights) {
        let g = Graph::new(self.m, self.edges.iter().map(|e| (e[0], e[1])));
        let w = EdgeWeights::new(&g, self.weights);
        (g, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path3() -> Graph {
        Graph::new(3, [(0, 1), (1, 2)])
    }

    #[test]
    fn complete_graph_forced_at_p_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = erdos_renyi(2, 1.0, &mut rng).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = erdos_renyi(8, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = erdos_renyi(8, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(is_connected(&a));
    }

    // Independent connectivity oracle: union-find over the edge set.
    fn connected_union_find(g: &Graph) -> bool {
        let mut parent: Vec<usize> = (0..g.node_count()).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(a, b) in g.edges() {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let root = find(&mut parent, 0);
        (0..g.node_count()).all(|i| find(&mut parent, i) == root)
    }

    #[test]
    fn sparse_seed_sweep_always_connected() {
        // p = 0.3 returns a graph for every seed; each must pass both the
        // module's BFS check and the independent union-find oracle
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = erdos_renyi(8, 0.3, &mut rng).unwrap();
            assert!(is_connected(&g));
            assert!(connected_union_find(&g));
        }
        // at p = 0.05 a connected 8-node draw is a rare event: whatever is
        // returned must be connected, and exhausting the budget is the
        // documented failure mode
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            match erdos_renyi(8, 0.05, &mut rng) {
                Ok(g) => {
                    assert!(is_connected(&g));
                    assert!(connected_union_find(&g));
                }
                Err(GraphError::ResampleBudgetExhausted { .. }) => {}
            }
        }
    }

    #[test]
    fn budget_exhaustion_reports_error() {
        // p tiny and only 1 attempt: overwhelmingly likely to be disconnected.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = erdos_renyi_with_budget(8, 1e-9, &mut rng, 1).unwrap_err();
        assert!(matches!(err, GraphError::ResampleBudgetExhausted { .. }));
    }

    #[test]
    fn connectivity_basics() {
        assert!(!is_connected(&Graph::new(3, [(0, 1)])));
        assert!(is_connected(&path3()));
        assert!(is_connected(&Graph::new(1, [])));
    }

    #[test]
    fn unit_weight_path_laplacian() {
        let g = path3();
        let p = weighted_laplacian(&g, &EdgeWeights::unit(&g));
        let expect = [[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(p[(i, j)], expect[i][j]);
            }
        }
    }

    #[test]
    fn weighted_single_edge_laplacian() {
        let g = Graph::new(2, [(0, 1)]);
        let w = EdgeWeights::new(&g, vec![2.0]);
        let p = weighted_laplacian(&g, &w);
        assert_eq!(p[(0, 0)], 2.0);
        assert_eq!(p[(0, 1)], -2.0);
        assert_eq!(p[(1, 0)], -2.0);
        assert_eq!(p[(1, 1)], 2.0);
    }

    #[test]
    fn degree_profile_examples() {
        // path 0-1-2, middle node: neighbors both have degree 1
        let ldp = local_degree_profile(&path3(), 1);
        assert_eq!(ldp.to_array(), [2.0, 1.0, 1.0, 1.0, 0.0]);

        // star center with 3 leaves
        let star = Graph::new(4, [(0, 1), (0, 2), (0, 3)]);
        let center = local_degree_profile(&star, 0);
        assert_eq!(center.to_array(), [3.0, 1.0, 1.0, 1.0, 0.0]);

        // a star leaf sees only the center
        let leaf = local_degree_profile(&star, 1);
        assert_eq!(leaf.to_array(), [1.0, 3.0, 3.0, 3.0, 0.0]);

        // node 0 has neighbors {1, 2} with degrees {1, 3}: variance of {1,3} is 1
        let g = Graph::new(5, [(0, 1), (0, 2), (2, 3), (2, 4), (3, 4)]);
        let ldp = local_degree_profile(&g, 0);
        assert_eq!(ldp.to_array(), [2.0, 1.0, 3.0, 2.0, 1.0]);
    }

    #[test]
    fn permute_identity_and_swap() {
        let g = path3();
        let w = EdgeWeights::unit(&g);
        let (gi, _) = permute(&g, &w, &[0, 1, 2]);
        assert_eq!(gi, g);
        // swap nodes 0 and 1 on path 0-1-2 gives path 1-0-2
        let (gs, _) = permute(&g, &w, &[1, 0, 2]);
        assert_eq!(gs.edges(), &[(0, 1), (0, 2)]);
    }

    proptest! {
        #[test]
        fn laplacian_rows_sum_to_zero(seed in 0u64..500, p in 0.2f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = erdos_renyi(6, p, &mut rng).unwrap();
            let n_edges = g.edge_count();
            let w = EdgeWeights::new(&g, (0..n_edges).map(|i| 0.5 + i as f64 * 0.3).collect());
            let lap = weighted_laplacian(&g, &w);
            let ones = vec![1.0; 6];
            let prod = lap.matvec(&ones);
            for v in prod {
                prop_assert!(v.abs() <= 1e-12);
            }
            for i in 0..6 {
                for j in 0..6 {
                    prop_assert_eq!(lap[(i, j)], lap[(j, i)]);
                    if i != j {
                        prop_assert!(lap[(i, j)] <= 0.0);
                    }
                }
            }
        }

        #[test]
        fn degree_profile_moves_with_relabeling(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = erdos_renyi(6, 0.5, &mut rng).unwrap();
            let w = EdgeWeights::unit(&g);
            let perm = [3usize, 5, 0, 1, 4, 2];
            let (pg, _) = permute(&g, &w, &perm);
            for i in 0..6 {
                let a = local_degree_profile(&g, i).to_array();
                let b = local_degree_profile(&pg, perm[i]).to_array();
                // relabeling reorders the neighbor-degree sums, so the
                // variance can move by an ulp
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
