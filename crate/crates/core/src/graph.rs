//! Immutable CSR graphs, degree statistics, and degree-histogram targets.
//!
//! A [`Graph`] stores sorted, deduplicated adjacency in compressed sparse row
//! form. [`StructureTargets`] holds the log-transformed degree vector and
//! neighbor-degree histograms that the structure losses regress against;
//! they depend only on the graph, never on model state, and are built once
//! per dataset.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Immutable undirected (or directed) graph in CSR form.
///
/// Invariants held by construction: offsets are non-decreasing with
/// `offsets[n] == neighbors.len()`, neighbor lists are sorted and free of
/// duplicates and self-loops, and when the graph is undirected every stored
/// arc has its reverse stored too.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    is_undirected: bool,
}

impl Graph {
    /// Build a graph from an edge list. Self-loops and duplicate arcs are
    /// dropped; reverse arcs are added when `undirected`.
    pub fn build(edges: &[(usize, usize)], num_nodes: usize, undirected: bool) -> Result<Graph> {
        if num_nodes == 0 {
            return Err(Error::graph("graph must have at least one node"));
        }
        let mut arcs = Vec::with_capacity(edges.len() * if undirected { 2 } else { 1 });
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::graph(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                continue;
            }
            arcs.push((u, v));
            if undirected {
                arcs.push((v, u));
            }
        }
        arcs.sort_unstable();
        arcs.dedup();

        let mut offsets = vec![0usize; num_nodes + 1];
        for &(u, _) in &arcs {
            offsets[u + 1] += 1;
        }
        for i in 0..num_nodes {
            offsets[i + 1] += offsets[i];
        }
        let neighbors = arcs.into_iter().map(|(_, v)| v).collect();
        Ok(Graph {
            num_nodes,
            offsets,
            neighbors,
            is_undirected: undirected,
        })
    }

    /// Erdős–Rényi G(n, p) fixture graph; deterministic per seed.
    pub fn random(num_nodes: usize, edge_prob: f64, seed: u64) -> Result<Graph> {
        if !(0.0..=1.0).contains(&edge_prob) {
            return Err(Error::graph(format!(
                "edge probability {edge_prob} outside [0, 1]"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for u in 0..num_nodes {
            for v in (u + 1)..num_nodes {
                if rng.gen::<f64>() < edge_prob {
                    edges.push((u, v));
                }
            }
        }
        Graph::build(&edges, num_nodes, true)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Number of stored arcs (twice the edge count when undirected).
    pub fn num_arcs(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_undirected(&self) -> bool {
        self.is_undirected
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.num_nodes).map(|v| self.degree(v)).collect()
    }

    pub fn max_degree(&self) -> usize {
        (0..self.num_nodes).map(|v| self.degree(v)).max().unwrap_or(0)
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    /// All stored arcs `(u, v)` in CSR order.
    pub fn arcs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.num_nodes).flat_map(move |u| self.neighbors(u).iter().map(move |&v| (u, v)))
    }

    /// Unique undirected edges as `(u, v)` with `u < v`.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        self.arcs().filter(|&(u, v)| u < v).collect()
    }
}

/// Histogram bucket for a degree `d >= 1` when the histogram has `k` columns:
/// degrees `1..k-1` map to columns `0..k-2`, everything `>= k` lands in the
/// overflow column `k-1`.
fn degree_bucket(d: usize, k: usize) -> usize {
    debug_assert!(d >= 1);
    if d < k {
        d - 1
    } else {
        k - 1
    }
}

/// Per-node neighbor-degree histogram: entry `(i, b)` counts neighbors of
/// node `i` whose degree falls in bucket `b`. Row `i` sums to `degree(i)`.
pub fn neighbor_degree_histogram(g: &Graph, k: usize) -> Result<Vec<u64>> {
    if k == 0 {
        return Err(Error::graph("histogram length K must be at least 1"));
    }
    let n = g.num_nodes();
    let mut hist = vec![0u64; n * k];
    for i in 0..n {
        for &u in g.neighbors(i) {
            let d = g.degree(u);
            // a neighbor has degree >= 1 (it is adjacent to node i)
            hist[i * k + degree_bucket(d, k)] += 1;
        }
    }
    Ok(hist)
}

/// Whole-graph degree histogram: entry `b` counts nodes whose degree falls in
/// bucket `b`. Isolated nodes (degree 0) have no bucket and are excluded.
pub fn graph_degree_histogram(g: &Graph, k: usize) -> Result<Vec<u64>> {
    if k == 0 {
        return Err(Error::graph("histogram length K must be at least 1"));
    }
    let mut hist = vec![0u64; k];
    for v in 0..g.num_nodes() {
        let d = g.degree(v);
        if d == 0 {
            continue;
        }
        hist[degree_bucket(d, k)] += 1;
    }
    Ok(hist)
}

/// Histogram length for a graph under a cap: `min(max_degree, k_cap)`, with
/// the last column acting as the overflow bucket. Never below 1.
pub fn histogram_len(max_degree: usize, k_cap: usize) -> usize {
    max_degree.min(k_cap).max(1)
}

/// Log-transformed structure-regression targets for one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureTargets {
    pub epsilon: f64,
    pub k: usize,
    /// `log2(degree(i) + epsilon)`, shape `[n, 1]`.
    pub log_degree: Tensor,
    /// `log2(hist + epsilon)` of the neighbor-degree histogram, shape `[n, k]`.
    pub log_neighbor_hist: Tensor,
    /// `log2(hist + epsilon)` of the whole-graph histogram, shape `[1, k]`;
    /// built only for graph-level tasks.
    pub log_graph_hist: Option<Tensor>,
}

/// Apply `log2(x + epsilon)` to the degree vector and histograms of `g`.
pub fn build_structure_targets(
    g: &Graph,
    k: usize,
    epsilon: f64,
    with_graph_hist: bool,
) -> Result<StructureTargets> {
    if epsilon <= 0.0 {
        return Err(Error::graph(format!("epsilon must be positive, got {epsilon}")));
    }
    let n = g.num_nodes();
    let log_degree = Tensor::from_vec(
        &[n, 1],
        (0..n)
            .map(|v| (g.degree(v) as f64 + epsilon).log2())
            .collect(),
    )?;
    let hist = neighbor_degree_histogram(g, k)?;
    let log_neighbor_hist = Tensor::from_vec(
        &[n, k],
        hist.iter().map(|&c| (c as f64 + epsilon).log2()).collect(),
    )?;
    let log_graph_hist = if with_graph_hist {
        let gh = graph_degree_histogram(g, k)?;
        Some(Tensor::from_vec(
            &[1, k],
            gh.iter().map(|&c| (c as f64 + epsilon).log2()).collect(),
        )?)
    } else {
        None
    };
    Ok(StructureTargets {
        epsilon,
        k,
        log_degree,
        log_neighbor_hist,
        log_graph_hist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn path3() -> Graph {
        Graph::build(&[(0, 1), (1, 2)], 3, true).unwrap()
    }

    #[test]
    fn build_path_graph_degrees() {
        let g = path3();
        assert_eq!(g.degrees(), vec![1, 2, 1]);
        assert!(g.has_edge(1, 0));
        assert!(!g.has_edge(0, 2));
    }

    #[test]
    fn build_drops_duplicates_and_self_loops() {
        let g = Graph::build(&[(0, 1), (1, 0), (0, 0)], 2, true).unwrap();
        assert_eq!(g.degrees(), vec![1, 1]);
        assert_eq!(g.num_arcs(), 2);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(Graph::build(&[(0, 3)], 3, true).is_err());
        assert!(Graph::build(&[], 0, true).is_err());
    }

    #[test]
    fn build_is_idempotent_on_stored_arcs() {
        let g = Graph::random(40, 0.15, 7).unwrap();
        let arcs: Vec<(usize, usize)> = g.arcs().collect();
        let g2 = Graph::build(&arcs, g.num_nodes(), true).unwrap();
        assert_eq!(g, g2);
    }

    /// Dense adjacency matrix, the oracle for degree and histogram checks.
    fn dense_adjacency(g: &Graph) -> Vec<Vec<u8>> {
        let n = g.num_nodes();
        let mut a = vec![vec![0u8; n]; n];
        for (u, v) in g.arcs() {
            a[u][v] = 1;
        }
        a
    }

    #[test]
    fn random_graph_degree_sum_matches_dense_count() {
        let g = Graph::random(50, 0.1, 3).unwrap();
        let a = dense_adjacency(&g);
        let mut unique_edges = 0;
        for u in 0..50 {
            for v in (u + 1)..50 {
                assert_eq!(a[u][v], a[v][u]);
                unique_edges += a[u][v] as usize;
            }
        }
        let degree_sum: usize = g.degrees().iter().sum();
        assert_eq!(degree_sum, 2 * unique_edges);
    }

    #[test]
    fn random_graph_edge_cases() {
        let g0 = Graph::random(10, 0.0, 1).unwrap();
        assert_eq!(g0.num_arcs(), 0);
        let g1 = Graph::random(4, 1.0, 1).unwrap();
        assert_eq!(g1.num_arcs(), 12); // complete K4: 6 edges
        let a = Graph::random(20, 0.4, 9).unwrap();
        let b = Graph::random(20, 0.4, 9).unwrap();
        assert_eq!(a, b);
        assert!(Graph::random(5, 1.5, 0).is_err());
    }

    #[test]
    fn neighbor_histogram_path_and_star() {
        let g = path3();
        let h = neighbor_degree_histogram(&g, 4).unwrap();
        assert_eq!(&h[4..8], &[2, 0, 0, 0]); // node 1: two degree-1 neighbors

        // star: center 0, leaves 1..=5
        let star = Graph::build(&[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)], 6, true).unwrap();
        let h = neighbor_degree_histogram(&star, 4).unwrap();
        assert_eq!(&h[0..4], &[5, 0, 0, 0]); // center: five degree-1 neighbors
        for leaf in 1..6 {
            assert_eq!(&h[leaf * 4..(leaf + 1) * 4], &[0, 0, 0, 1]); // degree 5 -> overflow
        }
    }

    /// Brute-force oracle: tally the degrees of each node's neighborhood
    /// straight off the dense adjacency matrix.
    fn neighbor_hist_oracle(g: &Graph, k: usize) -> Vec<u64> {
        let n = g.num_nodes();
        let a = dense_adjacency(g);
        let deg: Vec<usize> = a.iter().map(|row| row.iter().map(|&x| x as usize).sum()).collect();
        let mut hist = vec![0u64; n * k];
        for i in 0..n {
            for j in 0..n {
                if a[i][j] == 1 {
                    let d = deg[j];
                    let b = if d < k { d - 1 } else { k - 1 };
                    hist[i * k + b] += 1;
                }
            }
        }
        hist
    }

    #[test]
    fn neighbor_histogram_matches_dense_oracle() {
        let g = Graph::random(30, 0.2, 11).unwrap();
        assert_eq!(
            neighbor_degree_histogram(&g, 8).unwrap(),
            neighbor_hist_oracle(&g, 8)
        );
    }

    #[test]
    fn graph_histogram_triangle_and_path() {
        let tri = Graph::build(&[(0, 1), (1, 2), (0, 2)], 3, true).unwrap();
        assert_eq!(graph_degree_histogram(&tri, 4).unwrap(), vec![0, 3, 0, 0]);
        assert_eq!(graph_degree_histogram(&path3(), 4).unwrap(), vec![2, 1, 0, 0]);
    }

    #[test]
    fn graph_histogram_excludes_isolated_nodes() {
        let g = Graph::build(&[(0, 1)], 3, true).unwrap(); // node 2 isolated
        let h = graph_degree_histogram(&g, 3).unwrap();
        assert_eq!(h, vec![2, 0, 0]);
        assert_eq!(h.iter().sum::<u64>(), 2);
    }

    #[test]
    fn structure_target_log_values() {
        let g = path3();
        let t = build_structure_targets(&g, 2, 1.0, true).unwrap();
        // degree 1 -> log2(2) = 1, degree 2 -> log2(3)
        assert_eq!(t.log_degree.data()[0], 1.0);
        assert!((t.log_degree.data()[1] - 3.0f64.log2()).abs() < 1e-15);
        // histogram entry 4 with eps 1 -> log2(5)
        assert!(((4.0f64 + 1.0).log2() - 2.321928094887362).abs() < 1e-12);
        // node task: no graph hist requested
        let t2 = build_structure_targets(&g, 2, 1.0, false).unwrap();
        assert!(t2.log_graph_hist.is_none());
        assert!(build_structure_targets(&g, 2, 0.0, false).is_err());
    }

    #[test]
    fn histogram_len_caps() {
        assert_eq!(histogram_len(168, 32), 32);
        assert_eq!(histogram_len(5, 32), 5);
        assert_eq!(histogram_len(0, 32), 1);
    }

    proptest! {
        #[test]
        fn neighbor_hist_rows_sum_to_degree(seed in 0u64..50, n in 2usize..60, kp in 1usize..12) {
            let g = Graph::random(n, 0.15, seed).unwrap();
            let h = neighbor_degree_histogram(&g, kp).unwrap();
            for i in 0..n {
                let row_sum: u64 = h[i * kp..(i + 1) * kp].iter().sum();
                prop_assert_eq!(row_sum as usize, g.degree(i));
            }
        }

        #[test]
        fn neighbor_hist_matches_oracle_on_random_graphs(seed in 0u64..40, n in 2usize..60) {
            let g = Graph::random(n, 0.2, seed).unwrap();
            let k = histogram_len(g.max_degree(), 32);
            prop_assert_eq!(neighbor_degree_histogram(&g, k).unwrap(), neighbor_hist_oracle(&g, k));
        }
    }
}
