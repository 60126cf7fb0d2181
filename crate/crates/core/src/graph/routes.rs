//! Route features between node pairs, shortest distances and locality masks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{check_permutation, Graph};
use crate::autodiff::MASK_VALUE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Distance between nodes in different components.
pub const UNREACHABLE: u32 = u32::MAX;

/// Rank-3 array of route features `[n, n, f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTensor {
    n: usize,
    f: usize,
    data: Vec<f64>,
}

impl RouteTensor {
    pub fn zeros(n: usize, f: usize) -> Self {
        Self {
            n,
            f,
            data: vec![0.0; n * n * f],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn features(&self) -> usize {
        self.f
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, a: usize, b: usize) -> &[f64] {
        let o = (a * self.n + b) * self.f;
        &self.data[o..o + self.f]
    }

    fn at_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let o = (a * self.n + b) * self.f;
        &mut self.data[o..o + self.f]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n, self.f], self.data.clone()).expect("route tensor shape")
    }

    /// Feature-wise concatenation of two route tensors over the same nodes.
    pub fn concat(&self, other: &RouteTensor) -> Result<RouteTensor> {
        if self.n != other.n {
            return Err(Error::shape("route concat", &[self.n], &[other.n]));
        }
        let mut out = RouteTensor::zeros(self.n, self.f + other.f);
        for a in 0..self.n {
            for b in 0..self.n {
                let dst = out.at_mut(a, b);
                dst[..self.f].copy_from_slice(self.at(a, b));
                dst[self.f..].copy_from_slice(other.at(a, b));
            }
        }
        Ok(out)
    }

    /// Same features with every entry zeroed (route ablation).
    pub fn zeroed(&self) -> RouteTensor {
        RouteTensor::zeros(self.n, self.f)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RouteTensor {
        RouteTensor {
            n: self.n,
            f: self.f,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `out[perm[a], perm[b]] = self[a, b]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<RouteTensor> {
        check_permutation(perm, self.n)?;
        let mut out = RouteTensor::zeros(self.n, self.f);
        for a in 0..self.n {
            for b in 0..self.n {
                out.at_mut(perm[a], perm[b]).copy_from_slice(self.at(a, b));
            }
        }
        Ok(out)
    }
}

/// Walk-count histogram: entry `[a, b, r-1]` counts walks of length `r`
/// from `a` to `b`, for `r = 1..=k`. Built by `k` multiplications with the
/// adjacency matrix.
pub fn route_histogram(g: &Graph, k: usize) -> Result<RouteTensor> {
    if k == 0 {
        return Err(Error::Config("route histogram length k must be ≥ 1".into()));
    }
    let n = g.n();
    let adj = g.adjacency_matrix();
    let mut power = adj.clone();
    let mut out = RouteTensor::zeros(n, k);
    for r in 0..k {
        if r > 0 {
            power = power.matmul(&adj)?;
        }
        for a in 0..n {
            for b in 0..n {
                out.at_mut(a, b)[r] = power.data()[a * n + b];
            }
        }
    }
    Ok(out)
}

/// All-pairs BFS distances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<u32>,
}

impl DistanceMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: usize, b: usize) -> u32 {
        self.data[a * self.n + b]
    }

    /// Largest finite distance.
    pub fn diameter(&self) -> u32 {
        self.data.iter().copied().filter(|&d| d != UNREACHABLE).max().unwrap_or(0)
    }
}

pub fn shortest_distances(g: &Graph) -> DistanceMatrix {
    let n = g.n();
    let mut data = vec![UNREACHABLE; n * n];
    let mut queue = VecDeque::new();
    for s in 0..n {
        data[s * n + s] = 0;
        queue.push_back(s);
        while let Some(a) = queue.pop_front() {
            let d = data[s * n + a];
            for b in g.neighbors(a) {
                if data[s * n + b] == UNREACHABLE {
                    data[s * n + b] = d + 1;
                    queue.push_back(b);
                }
            }
        }
    }
    DistanceMatrix { n, data }
}

/// One bucket of shortest-path distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceBin {
    /// `min ≤ d ≤ max`; `max = None` is open-ended.
    Range { min: u32, max: Option<u32> },
    Unreachable,
}

impl DistanceBin {
    fn contains(&self, d: u32) -> bool {
        match *self {
            DistanceBin::Unreachable => d == UNREACHABLE,
            DistanceBin::Range { min, max } => d != UNREACHABLE && d >= min && max.is_none_or(|m| d <= m),
        }
    }
}

/// A validated partition of `[0, ∞) ∪ {unreachable}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<DistanceBin>", into = "Vec<DistanceBin>")]
pub struct DistanceBins(Vec<DistanceBin>);

impl DistanceBins {
    pub fn new(bins: Vec<DistanceBin>) -> Result<Self> {
        let mut ranges: Vec<(u32, Option<u32>)> = Vec::new();
        let mut unreachable = 0;
        for bin in &bins {
            match *bin {
                DistanceBin::Unreachable => unreachable += 1,
                DistanceBin::Range { min, max } => {
                    if max.is_some_and(|m| m < min) {
                        return Err(Error::Config(format!("empty distance bin [{min}, {max:?}]")));
                    }
                    ranges.push((min, max));
                }
            }
        }
        if unreachable != 1 {
            return Err(Error::Config(format!(
                "distance bins need exactly one unreachable bin, found {unreachable}"
            )));
        }
        ranges.sort();
        let mut next = 0u32;
        for (i, &(min, max)) in ranges.iter().enumerate() {
            if min < next {
                return Err(Error::Config(format!("distance bins overlap at {min}")));
            }
            if min > next {
                return Err(Error::Config(format!("distance bins leave {next}..{min} uncovered")));
            }
            match max {
                Some(m) => next = m + 1,
                None if i + 1 == ranges.len() => return Ok(Self(bins)),
                None => return Err(Error::Config(format!("open-ended bin from {min} overlaps later bins"))),
            }
        }
        Err(Error::Config(format!("distance bins leave [{next}, ∞) uncovered")))
    }

    /// `[0], [1], …, [max-1], [max, ∞), unreachable`.
    pub fn one_hot_up_to(max: u32) -> Self {
        let mut bins: Vec<DistanceBin> = (0..max)
            .map(|d| DistanceBin::Range { min: d, max: Some(d) })
            .collect();
        bins.push(DistanceBin::Range { min: max, max: None });
        bins.push(DistanceBin::Unreachable);
        Self(bins)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bins(&self) -> &[DistanceBin] {
        &self.0
    }

    fn index_of(&self, d: u32) -> usize {
        self.0.iter().position(|b| b.contains(d)).expect("bins partition all distances")
    }
}

impl TryFrom<Vec<DistanceBin>> for DistanceBins {
    type Error = Error;
    fn try_from(v: Vec<DistanceBin>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DistanceBins> for Vec<DistanceBin> {
    fn from(b: DistanceBins) -> Self {
        b.0
    }
}

/// One-hot encoding of the shortest distance of every node pair.
pub fn distance_bin_features(g: &Graph, bins: &DistanceBins) -> RouteTensor {
    let dist = shortest_distances(g);
    let mut out = RouteTensor::zeros(g.n(), bins.len());
    for a in 0..g.n() {
        for b in 0..g.n() {
            let i = bins.index_of(dist.get(a, b));
            out.at_mut(a, b)[i] = 1.0;
        }
    }
    out
}

/// Which shortest distances a head may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radius {
    /// No locality mask at all, unreachable pairs included.
    Unlimited,
    /// Attention ball `d ≤ r`.
    Ball(u32),
    /// Attention shell `min ≤ d ≤ max`.
    Shell { min: u32, max: u32 },
}

impl Radius {
    pub fn admits(&self, d: u32) -> bool {
        match *self {
            Radius::Unlimited => true,
            _ if d == UNREACHABLE => false,
            Radius::Ball(r) => d <= r,
            Radius::Shell { min, max } => d >= min && d <= max,
        }
    }
}

/// Additive `n × n` mask: 0 where `radius` admits the distance, −1e9 elsewhere.
pub fn attention_ball_mask(dist: &DistanceMatrix, radius: Radius) -> Tensor {
    let n = dist.n();
    let data = (0..n * n)
        .map(|i| if radius.admits(dist.data[i]) { 0.0 } else { MASK_VALUE })
        .collect();
    Tensor::new(vec![n, n], data).expect("square mask")
}

/// Recipe for the generic route features used in experiments: walk-count
/// histogram and/or one-hot distance bins, concatenated in that order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteFeatureSpec {
    pub histogram_k: Option<usize>,
    pub distance_bins: Option<DistanceBins>,
    /// Apply `ln(1 + x)` to walk counts, which grow geometrically with k.
    #[serde(default)]
    pub log_counts: bool,
}

impl RouteFeatureSpec {
    /// Raw walk-count histogram only.
    pub fn histogram(k: usize) -> Self {
        Self {
            histogram_k: Some(k),
            distance_bins: None,
            log_counts: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.histogram_k.unwrap_or(0) + self.distance_bins.as_ref().map_or(0, DistanceBins::len)
    }

    pub fn build(&self, g: &Graph) -> Result<RouteTensor> {
        let mut out = RouteTensor::zeros(g.n(), 0);
        if let Some(k) = self.histogram_k {
            let mut h = route_histogram(g, k)?;
            if self.log_counts {
                h = h.map(f64::ln_1p);
            }
            out = out.concat(&h)?;
        }
        if let Some(bins) = &self.distance_bins {
            out = out.concat(&distance_bin_features(g, bins))?;
        }
        if out.features() == 0 {
            return Err(Error::Config("route feature spec selects no features".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn k3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (0, 2), (1, 2)]).unwrap()
    }

    fn path3() -> Graph {
        Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn histogram_of_triangle() {
        let p = route_histogram(&k3(), 3).unwrap();
        assert_eq!(p.at(0, 1), &[1.0, 1.0, 3.0]);
        assert_eq!(p.at(0, 0), &[0.0, 2.0, 2.0]);
    }

    #[test]
    fn histogram_of_path() {
        let p = route_histogram(&path3(), 2).unwrap();
        assert_eq!(p.at(0, 2), &[0.0, 1.0]);
        assert!(route_histogram(&path3(), 0).is_err());
    }

    #[test]
    fn histogram_of_empty_graph() {
        let p = route_histogram(&Graph::empty(4), 3).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn distances() {
        let d = shortest_distances(&k3());
        assert!((0..3).all(|a| (0..3).all(|b| d.get(a, b) == u32::from(a != b))));
        assert_eq!(shortest_distances(&path3()).get(0, 2), 2);
        let two = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let d = shortest_distances(&two);
        assert_eq!(d.get(0, 3), UNREACHABLE);
        assert_eq!(d.get(2, 3), 1);
    }

    #[test]
    fn distance_bins_of_triangle() {
        let bins = DistanceBins::new(vec![
            DistanceBin::Range { min: 0, max: Some(0) },
            DistanceBin::Range { min: 1, max: Some(1) },
            DistanceBin::Range { min: 2, max: None },
            DistanceBin::Unreachable,
        ])
        .unwrap();
        let p = distance_bin_features(&k3(), &bins);
        assert_eq!(p.at(0, 1), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(p.at(2, 2), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn invalid_bins() {
        let r = |min, max| DistanceBin::Range { min, max };
        assert!(DistanceBins::new(vec![r(0, Some(1)), r(1, None), DistanceBin::Unreachable]).is_err());
        assert!(DistanceBins::new(vec![r(0, Some(0)), r(2, None), DistanceBin::Unreachable]).is_err());
        assert!(DistanceBins::new(vec![r(0, Some(3))]).is_err());
        assert!(DistanceBins::new(vec![r(0, Some(3)), DistanceBin::Unreachable]).is_err());
        assert!(DistanceBins::new(vec![r(0, None), r(3, Some(4)), DistanceBin::Unreachable]).is_err());
        assert!(DistanceBins::new(vec![r(1, Some(0)), r(0, None), DistanceBin::Unreachable]).is_err());
        assert!(serde_json::from_str::<DistanceBins>(r#"[{"range":{"min":0,"max":null}}]"#).is_err());
    }

    #[test]
    fn ball_masks() {
        let d = shortest_distances(&path3());
        assert!(attention_ball_mask(&d, Radius::Ball(d.diameter())).data().iter().all(|&x| x == 0.0));
        let m0 = attention_ball_mask(&d, Radius::Ball(0));
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(m0.at(&[a, b]) == 0.0, a == b);
            }
        }
        let m1 = attention_ball_mask(&d, Radius::Ball(1));
        assert_eq!(&m1.data()[..3], &[0.0, 0.0, MASK_VALUE]);
        let shell = attention_ball_mask(&d, Radius::Shell { min: 1, max: 1 });
        assert_eq!(&shell.data()[..3], &[MASK_VALUE, 0.0, MASK_VALUE]);
    }

    #[test]
    fn unreachable_is_outside_every_ball() {
        let two = Graph::from_edges(4, &[(0, 1), (2, 3)]).unwrap();
        let d = shortest_distances(&two);
        assert_eq!(attention_ball_mask(&d, Radius::Ball(100)).at(&[0, 3]), MASK_VALUE);
        assert_eq!(attention_ball_mask(&d, Radius::Unlimited).at(&[0, 3]), 0.0);
    }

    fn graph_strategy() -> impl Strategy<Value = Graph> {
        (1usize..9).prop_flat_map(|n| {
            proptest::collection::vec(any::<bool>(), n * (n - 1) / 2).prop_map(move |bits| {
                let mut edges = Vec::new();
                let mut k = 0;
                for j in 1..n {
                    for i in 0..j {
                        if bits[k] {
                            edges.push((i, j));
                        }
                        k += 1;
                    }
                }
                Graph::from_edges(n, &edges).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn histogram_matches_matrix_powers(g in graph_strategy(), k in 1usize..6) {
            let p = route_histogram(&g, k).unwrap();
            let n = g.n();
            // independent oracle: naive triple-loop powers
            let adj: Vec<Vec<f64>> = (0..n).map(|a| (0..n).map(|b| if g.has_edge(a, b) { 1.0 } else { 0.0 }).collect()).collect();
            let mut pow = adj.clone();
            for r in 0..k {
                if r > 0 {
                    let mut next = vec![vec![0.0; n]; n];
                    for a in 0..n { for b in 0..n { for c in 0..n { next[a][b] += pow[a][c] * adj[c][b]; } } }
                    pow = next;
                }
                for a in 0..n { for b in 0..n {
                    prop_assert_eq!(p.at(a, b)[r], pow[a][b]);
                    prop_assert_eq!(p.at(a, b)[r], p.at(b, a)[r]);
                } }
            }
        }

        #[test]
        fn relabeling_permutes_routes(g in graph_strategy(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let n = g.n();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let spec = RouteFeatureSpec { histogram_k: Some(3), distance_bins: Some(DistanceBins::one_hot_up_to(3)), log_counts: false };
            let p = spec.build(&g).unwrap();
            let pg = spec.build(&g.permuted(&perm).unwrap()).unwrap();
            prop_assert_eq!(p.permuted(&perm).unwrap(), pg);
        }

        #[test]
        fn one_hot_bins_sum_to_one(g in graph_strategy(), max in 0u32..5) {
            let p = distance_bin_features(&g, &DistanceBins::one_hot_up_to(max));
            for a in 0..g.n() { for b in 0..g.n() {
                prop_assert_eq!(p.at(a, b).iter().sum::<f64>(), 1.0);
            } }
        }

        #[test]
        fn ball_mask_is_monotone(g in graph_strategy(), r in 0u32..6) {
            let d = shortest_distances(&g);
            let small = attention_ball_mask(&d, Radius::Ball(r));
            let big = attention_ball_mask(&d, Radius::Ball(r + 1));
            for (s, b) in small.data().iter().zip(big.data()) {
                if *s == 0.0 { prop_assert_eq!(*b, 0.0); }
            }
        }
    }
}
