use super::routes::{shortest_distances, DistanceMatrix, Radius, RouteTensor};
use super::Graph;
use crate::autodiff::MASK_VALUE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Zero-padded stack of graphs.
///
/// Sample `b` occupies slots `0..node_counts[b]`; when `pool` is set the
/// pool node sits in the last slot `n_max - 1` of every sample; remaining
/// slots are padding.
#[derive(Debug, Clone)]
pub struct BatchedGraphs {
    pub batch_size: usize,
    /// Padded node count, including the pool slot.
    pub n_max: usize,
    pub pool: bool,
    /// Node input features `[B, N, F_nodes]`; graphs without features get a
    /// constant 1.0 scalar per node.
    pub features: Tensor,
    /// Route features `[B, N, N, F_route]`, zero on pool and padded pairs.
    pub routes: Tensor,
    /// `[B, N]`: 0 for real and pool slots, −1e9 for padding.
    pub node_mask: Tensor,
    /// `[B, N, N]`: −1e9 on any pair touching padding, 0 elsewhere.
    pub route_mask: Tensor,
    pub node_counts: Vec<usize>,
    distances: Vec<DistanceMatrix>,
}

/// Pads and stacks `graphs` with their route tensors.
pub fn batch(graphs: &[Graph], routes: &[RouteTensor], pool: bool) -> Result<BatchedGraphs> {
    if graphs.is_empty() {
        return Err(Error::Param("cannot batch zero graphs".into()));
    }
    if graphs.len() != routes.len() {
        return Err(Error::Param(format!("{} graphs but {} route tensors", graphs.len(), routes.len())));
    }
    let f_route = routes[0].features();
    let f_nodes = graphs[0].node_features().map_or(1, |x| x.shape()[1]);
    for (i, (g, p)) in graphs.iter().zip(routes).enumerate() {
        if p.features() != f_route {
            return Err(Error::shape("batch route features", &[f_route], &[p.features()]));
        }
        if p.n() != g.n() {
            return Err(Error::Param(format!("sample {i}: route tensor over {} nodes, graph has {}", p.n(), g.n())));
        }
        if g.node_features().map_or(1, |x| x.shape()[1]) != f_nodes
            || g.node_features().is_some() != graphs[0].node_features().is_some()
        {
            return Err(Error::Param(format!("sample {i}: node feature dimension differs from sample 0")));
        }
    }
    let b = graphs.len();
    let node_counts: Vec<usize> = graphs.iter().map(Graph::n).collect();
    let n_max = node_counts.iter().copied().max().unwrap_or(0) + usize::from(pool);
    let pool_slot = n_max.wrapping_sub(1);

    let mut features = Tensor::zeros(&[b, n_max, f_nodes]);
    let mut route = Tensor::zeros(&[b, n_max, n_max, f_route]);
    let mut node_mask = Tensor::full(&[b, n_max], MASK_VALUE);
    let mut route_mask = Tensor::full(&[b, n_max, n_max], MASK_VALUE);
    for (s, (g, p)) in graphs.iter().zip(routes).enumerate() {
        let n = g.n();
        let fd = features.data_mut();
        for i in 0..n {
            let dst = &mut fd[(s * n_max + i) * f_nodes..(s * n_max + i + 1) * f_nodes];
            match g.node_features() {
                Some(x) => dst.copy_from_slice(&x.data()[i * f_nodes..(i + 1) * f_nodes]),
                None => dst[0] = 1.0,
            }
        }
        let rd = route.data_mut();
        for i in 0..n {
            for j in 0..n {
                let o = ((s * n_max + i) * n_max + j) * f_route;
                rd[o..o + f_route].copy_from_slice(p.at(i, j));
            }
        }
        let live: Vec<usize> = (0..n).chain(pool.then_some(pool_slot)).collect();
        for &i in &live {
            node_mask.data_mut()[s * n_max + i] = 0.0;
            for &j in &live {
                route_mask.data_mut()[(s * n_max + i) * n_max + j] = 0.0;
            }
        }
    }
    Ok(BatchedGraphs {
        batch_size: b,
        n_max,
        pool,
        features,
        routes: route,
        node_mask,
        route_mask,
        node_counts,
        distances: graphs.iter().map(shortest_distances).collect(),
    })
}

impl BatchedGraphs {
    pub fn pool_slot(&self) -> Option<usize> {
        self.pool.then(|| self.n_max - 1)
    }

    pub fn features_dim(&self) -> usize {
        self.features.last_dim()
    }

    pub fn route_dim(&self) -> usize {
        self.routes.last_dim()
    }

    pub fn distances(&self, sample: usize) -> &DistanceMatrix {
        &self.distances[sample]
    }

    /// Full additive attention mask `[B, N, N]` for one head: the locality
    /// mask for `radius` on real pairs, the structural route mask, and the
    /// node mask broadcast over attended columns. Pool rows and columns are
    /// never masked by locality.
    pub fn attention_mask(&self, radius: Radius) -> Tensor {
        let n = self.n_max;
        let mut mask = self.route_mask.clone();
        let md = mask.data_mut();
        for (s, &count) in self.node_counts.iter().enumerate() {
            let dist = &self.distances[s];
            for i in 0..count {
                for j in 0..count {
                    if !radius.admits(dist.get(i, j)) {
                        md[(s * n + i) * n + j] = MASK_VALUE;
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    md[(s * n + i) * n + j] += self.node_mask.data()[s * n + j];
                }
            }
        }
        mask
    }

    /// `[B, N]` weights selecting real nodes (pool and padding excluded):
    /// 1 each for sums, `1/n` each for means.
    pub fn real_node_weights(&self, mean: bool) -> Tensor {
        let mut w = Tensor::zeros(&[self.batch_size, self.n_max]);
        for (s, &count) in self.node_counts.iter().enumerate() {
            let v = if mean { 1.0 / count.max(1) as f64 } else { 1.0 };
            for i in 0..count {
                w.data_mut()[s * self.n_max + i] = v;
            }
        }
        w
    }

    /// Flat row indices (over `B·N`) of the pool slots.
    pub fn pool_rows(&self) -> Vec<usize> {
        match self.pool_slot() {
            Some(p) => (0..self.batch_size).map(|s| s * self.n_max + p).collect(),
            None => Vec::new(),
        }
    }

    /// `[B, N]` booleans marking real node slots.
    pub fn real_node_mask(&self) -> Vec<bool> {
        self.real_node_weights(false).data().iter().map(|&w| w > 0.0).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::route_histogram;

    fn path(n: usize) -> Graph {
        let edges: Vec<_> = (1..n).map(|i| (i - 1, i)).collect();
        Graph::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn single_graph_without_pool() {
        let g = path(3);
        let p = route_histogram(&g, 2).unwrap();
        let b = batch(&[g], &[p], false).unwrap();
        assert_eq!(b.n_max, 3);
        assert!(b.node_mask.data().iter().all(|&x| x == 0.0));
        assert!(b.route_mask.data().iter().all(|&x| x == 0.0));
        assert_eq!(b.features.data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mixed_sizes_with_pool() {
        let gs = [path(3), path(5)];
        let ps: Vec<_> = gs.iter().map(|g| route_histogram(g, 2).unwrap()).collect();
        let b = batch(&gs, &ps, true).unwrap();
        assert_eq!(b.n_max, 6);
        assert_eq!(b.pool_slot(), Some(5));
        // sample 0: real 0..3, padded 3..5, pool 5
        let nm: Vec<f64> = b.node_mask.data()[..6].to_vec();
        assert_eq!(nm, vec![0.0, 0.0, 0.0, MASK_VALUE, MASK_VALUE, 0.0]);
        assert!(b.node_mask.data()[6..].iter().all(|&x| x == 0.0));
        // pool unmasked both ways for real nodes, padded rows fully masked
        for i in 0..3 {
            assert_eq!(b.route_mask.at(&[0, i, 5]), 0.0);
            assert_eq!(b.route_mask.at(&[0, 5, i]), 0.0);
        }
        for j in 0..6 {
            assert_eq!(b.route_mask.at(&[0, 3, j]), MASK_VALUE);
            assert_eq!(b.route_mask.at(&[0, j, 4]), MASK_VALUE);
        }
        // no route features to or from the pool
        let f = b.route_dim();
        assert!(b.routes.data()[(5 * 6) * f..(6 * 6) * f].iter().all(|&x| x == 0.0));
        assert_eq!(b.pool_rows(), vec![5, 11]);
    }

    #[test]
    fn ball_mask_keeps_pool_visible() {
        let g = path(4);
        let p = route_histogram(&g, 1).unwrap();
        let b = batch(&[g], &[p], true).unwrap();
        let m = b.attention_mask(Radius::Ball(1));
        assert_eq!(m.at(&[0, 0, 2]), MASK_VALUE);
        assert_eq!(m.at(&[0, 0, 1]), 0.0);
        assert_eq!(m.at(&[0, 0, 4]), 0.0);
        assert_eq!(m.at(&[0, 4, 3]), 0.0);
    }

    #[test]
    fn feature_dimension_mismatch() {
        let g = path(2);
        let a = route_histogram(&g, 2).unwrap();
        let c = route_histogram(&g, 3).unwrap();
        assert!(batch(&[g.clone(), g], &[a, c], false).is_err());
    }

    #[test]
    fn mean_weights_exclude_pool_and_padding() {
        let gs = [path(2), path(4)];
        let ps: Vec<_> = gs.iter().map(|g| route_histogram(g, 1).unwrap()).collect();
        let b = batch(&gs, &ps, true).unwrap();
        let w = b.real_node_weights(true);
        assert_eq!(&w.data()[..5], &[0.5, 0.5, 0.0, 0.0, 0.0]);
        assert_eq!(&w.data()[5..], &[0.25, 0.25, 0.25, 0.25, 0.0]);
    }
}
