//! kNN brain graphs over functional connectivity.

use autograd::{RngStream, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BrainGraph {
    pub n_nodes: usize,
    pub k: usize,
    pub edges: Vec<Edge>,
}

impl BrainGraph {
    /// Out-neighbour lists, one per node.
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_nodes];
        for e in &self.edges {
            out[e.src].push(e.dst);
        }
        out
    }

    pub fn out_degree(&self, node: usize) -> usize {
        self.edges.iter().filter(|e| e.src == node).count()
    }

    /// Dense 0/1 adjacency, `a[i][j] = 1` for an edge `i -> j`.
    pub fn adjacency(&self) -> Tensor {
        let mut a = Tensor::zeros(self.n_nodes, self.n_nodes);
        for e in &self.edges {
            a.set(e.src, e.dst, 1.0);
        }
        a
    }
}

/// For every node, directed edges to its `k` strongest `|fc|` partners
/// (self excluded, ties to the lower index). With `symmetrize`, reverse edges
/// are added where missing, so degrees may exceed `k`.
pub fn knn_graph(fc: &Tensor, k: usize, symmetrize: bool) -> BrainGraph {
    let n = fc.rows();
    let take = k.min(n.saturating_sub(1));
    let mut edges = Vec::with_capacity(n * take);
    for i in 0..n {
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.sort_by(|&a, &b| {
            fc.get(i, b)
                .abs()
                .partial_cmp(&fc.get(i, a).abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        edges.extend(others.into_iter().take(take).map(|j| Edge {
            src: i,
            dst: j,
            weight: fc.get(i, j),
        }));
    }
    if symmetrize {
        let mut present = vec![false; n * n];
        for e in &edges {
            present[e.src * n + e.dst] = true;
        }
        let reverse: Vec<Edge> = edges
            .iter()
            .filter(|e| !present[e.dst * n + e.src])
            .map(|e| Edge {
                src: e.dst,
                dst: e.src,
                weight: fc.get(e.dst, e.src),
            })
            .collect();
        edges.extend(reverse);
        edges.sort_by_key(|e| (e.src, e.dst));
        edges.dedup_by_key(|e| (e.src, e.dst));
    }
    BrainGraph { n_nodes: n, k, edges }
}

/// Removes each edge independently with probability `p`.
pub fn edge_dropout(graph: &BrainGraph, p: f64, rng: &mut RngStream) -> BrainGraph {
    if p <= 0.0 {
        return graph.clone();
    }
    BrainGraph {
        n_nodes: graph.n_nodes,
        k: graph.k,
        edges: graph.edges.iter().filter(|_| !rng.bernoulli(p)).copied().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym(n: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::from_fn(n, n, |i, j| if i == j { 0.0 } else { f(i.min(j), i.max(j)) })
    }

    #[test]
    fn complete_when_k_large() {
        let fc = sym(5, |i, j| (i * 7 + j) as f64 * 0.01);
        let g = knn_graph(&fc, 40, false);
        assert_eq!(g.edges.len(), 20);
        assert!(g.edges.iter().all(|e| e.src != e.dst));
    }

    #[test]
    fn strongest_partner_by_exhaustive_comparison() {
        let vals = [[0.0, 0.3, -0.9, 0.1], [0.3, 0.0, 0.2, 0.25], [-0.9, 0.2, 0.0, 0.4], [0.1, 0.25, 0.4, 0.0]];
        let fc = Tensor::from_fn(4, 4, |i, j| vals[i][j]);
        let g = knn_graph(&fc, 1, false);
        for i in 0..4 {
            let best = (0..4)
                .filter(|&j| j != i)
                .max_by(|&a, &b| vals[i][a].abs().partial_cmp(&vals[i][b].abs()).unwrap())
                .unwrap();
            assert_eq!(g.neighbours()[i], vec![best]);
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        let fc = sym(4, |_, _| 0.5);
        let g = knn_graph(&fc, 2, false);
        assert_eq!(g.neighbours()[3], vec![0, 1]);
        assert_eq!(g.neighbours()[0], vec![1, 2]);
    }

    #[test]
    fn zero_dropout_is_identity() {
        let fc = sym(6, |i, j| (i + 2 * j) as f64 * 0.05);
        let g = knn_graph(&fc, 3, false);
        let mut rng = RngStream::new(1, "edges");
        assert_eq!(edge_dropout(&g, 0.0, &mut rng), g);
    }
}
