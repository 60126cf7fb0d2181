//! Graphs, file ingestion, route features and padded batching.

mod batch;
pub mod graph6;
mod json;
pub mod routes;

pub use batch::{batch, BatchedGraphs};
pub use json::{load_graph_json, GraphDoc};
pub use routes::{
    attention_ball_mask, distance_bin_features, route_histogram, shortest_distances, DistanceBin,
    DistanceBins, DistanceMatrix, Radius, RouteFeatureSpec, RouteTensor, UNREACHABLE,
};

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Simple undirected graph with optional per-node features.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    adjacency: Vec<bool>,
    node_features: Option<Tensor>,
    name: Option<String>,
}

impl Graph {
    /// Graph on `n` nodes without edges.
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            adjacency: vec![false; n * n],
            node_features: None,
            name: None,
        }
    }

    /// Builds a graph from an undirected edge list, rejecting self-loops,
    /// out-of-range endpoints and repeated edges.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::empty(n);
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Graph(format!("edge ({a}, {b}) out of range for n = {n}")));
            }
            if a == b {
                return Err(Error::Graph(format!("self-loop at node {a}")));
            }
            if g.has_edge(a, b) {
                return Err(Error::Graph(format!("duplicate edge ({a}, {b})")));
            }
            g.adjacency[a * n + b] = true;
            g.adjacency[b * n + a] = true;
        }
        Ok(g)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    /// Attaches an `n × F` feature matrix.
    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.shape()[0] != self.n {
            return Err(Error::Graph(format!(
                "node features of shape {:?} do not match {} nodes",
                features.shape(),
                self.n
            )));
        }
        self.node_features = Some(features);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn node_features(&self) -> Option<&Tensor> {
        self.node_features.as_ref()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a * self.n + b]
    }

    pub fn neighbors(&self, a: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&b| self.adjacency[a * self.n + b])
    }

    pub fn degree(&self, a: usize) -> usize {
        self.neighbors(a).count()
    }

    /// Edges `(a, b)` with `a < b`, in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n {
            for b in a + 1..self.n {
                if self.has_edge(a, b) {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&e| e).count() / 2
    }

    pub fn adjacency_matrix(&self) -> Tensor {
        let data = self.adjacency.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
        Tensor::new(vec![self.n, self.n], data).expect("square adjacency")
    }

    /// `Some(d)` when every node has degree `d`.
    pub fn regular_degree(&self) -> Option<usize> {
        let d = if self.n == 0 { 0 } else { self.degree(0) };
        (0..self.n).all(|a| self.degree(a) == d).then_some(d)
    }

    pub fn is_connected(&self) -> bool {
        if self.n == 0 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0]);
        seen[0] = true;
        while let Some(a) = queue.pop_front() {
            for b in self.neighbors(a) {
                if !seen[b] {
                    seen[b] = true;
                    queue.push_back(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Relabels node `i` as `perm[i]`; features move with their nodes.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n)?;
        let mut g = Self::empty(self.n);
        for (a, b) in self.edges() {
            g.adjacency[perm[a] * self.n + perm[b]] = true;
            g.adjacency[perm[b] * self.n + perm[a]] = true;
        }
        if let Some(x) = &self.node_features {
            let f = x.shape()[1];
            let mut out = Tensor::zeros(&[self.n, f]);
            for i in 0..self.n {
                out.data_mut()[perm[i] * f..(perm[i] + 1) * f].copy_from_slice(&x.data()[i * f..(i + 1) * f]);
            }
            g.node_features = Some(out);
        }
        g.name = self.name.clone();
        Ok(g)
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Param(format!("{perm:?} is not a permutation of 0..{n}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_edges_validates() {
        assert!(Graph::from_edges(3, &[(0, 0)]).is_err());
        assert!(Graph::from_edges(3, &[(0, 3)]).is_err());
        assert!(Graph::from_edges(3, &[(0, 1), (1, 0)]).is_err());
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        assert_eq!(g.edges(), vec![(0, 1), (1, 2)]);
        assert!(g.is_connected());
        assert_eq!(g.regular_degree(), None);
    }

    #[test]
    fn permutation_moves_edges() {
        let g = Graph::from_edges(3, &[(0, 1)]).unwrap();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert!(p.has_edge(2, 0));
        assert_eq!(p.edge_count(), 1);
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }
}
