//! Isomorphism experiments: 1-WL color refinement, adjacency spectra, the
//! builtin regular-graph families and separation by an untrained network.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, ScoreMap};
use crate::error::{Error, Result};
use crate::graph::graph6::parse_graph6;
use crate::graph::{batch, Graph, Radius, RouteFeatureSpec, RouteTensor};
use crate::model::{HeadKind, InformerConfig, InformerModel};

/// Colors of one refinement run. Color ids come from a dictionary that can
/// be shared between graphs, so ids are comparable across them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WlColoring {
    /// `rounds[t][v]`: color of node `v` after `t` refinement steps.
    pub rounds: Vec<Vec<usize>>,
    /// `histograms[t]`: `(color, count)` pairs sorted by color.
    pub histograms: Vec<Vec<(usize, usize)>>,
}

impl WlColoring {
    pub fn colors(&self) -> &[usize] {
        self.rounds.last().map_or(&[], Vec::as_slice)
    }

    pub fn iterations(&self) -> usize {
        self.rounds.len() - 1
    }

    /// Sorted color-class sizes after round `t`.
    pub fn class_sizes(&self, t: usize) -> Vec<usize> {
        let mut sizes: Vec<usize> = self.histograms[t].iter().map(|&(_, c)| c).collect();
        sizes.sort_unstable();
        sizes
    }
}

/// Injective map from `(own color, sorted neighbor colors)` to fresh ids.
#[derive(Debug, Default)]
pub struct WlDictionary {
    ids: BTreeMap<(usize, Vec<usize>), usize>,
}

impl WlDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    fn id(&mut self, key: (usize, Vec<usize>)) -> usize {
        // Id 0 is the uniform starting color.
        let next = self.ids.len() + 1;
        *self.ids.entry(key).or_insert(next)
    }

    /// Refines `g` for up to `max_iter` rounds; stops early at a stable
    /// partition when `stop_when_stable` is set.
    pub fn refine(&mut self, g: &Graph, max_iter: usize, stop_when_stable: bool) -> WlColoring {
        let mut colors = vec![0usize; g.n()];
        let mut out = WlColoring {
            rounds: vec![colors.clone()],
            histograms: vec![histogram(&colors)],
        };
        for _ in 0..max_iter {
            let next: Vec<usize> = (0..g.n())
                .map(|v| {
                    let mut nb: Vec<usize> = g.neighbors(v).map(|u| colors[u]).collect();
                    nb.sort_unstable();
                    self.id((colors[v], nb))
                })
                .collect();
            let stable = class_count(&next) == class_count(&colors);
            colors = next;
            out.histograms.push(histogram(&colors));
            out.rounds.push(colors.clone());
            if stable && stop_when_stable {
                break;
            }
        }
        out
    }
}

fn histogram(colors: &[usize]) -> Vec<(usize, usize)> {
    let mut h = BTreeMap::new();
    for &c in colors {
        *h.entry(c).or_insert(0) += 1;
    }
    h.into_iter().collect()
}

fn class_count(colors: &[usize]) -> usize {
    histogram(colors).len()
}

/// 1-WL from uniform colors until the partition stops refining (at most
/// `max_iter` rounds).
pub fn wl_refine(g: &Graph, max_iter: usize) -> WlColoring {
    WlDictionary::new().refine(g, max_iter, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WlVerdict {
    Separated,
    Indistinguishable,
}

/// Refines both graphs with one shared dictionary; separated when the
/// color histograms differ after any round.
pub fn wl_distinguish(g1: &Graph, g2: &Graph) -> WlVerdict {
    if g1.n() != g2.n() {
        return WlVerdict::Separated;
    }
    let mut dict = WlDictionary::new();
    let rounds = g1.n().max(1);
    let a = dict.refine(g1, rounds, false);
    let b = dict.refine(g2, rounds, false);
    if a.histograms == b.histograms {
        WlVerdict::Indistinguishable
    } else {
        WlVerdict::Separated
    }
}

/// Adjacency eigenvalues in ascending order.
pub fn spectrum(g: &Graph) -> Vec<f64> {
    let n = g.n();
    let m = DMatrix::from_fn(n, n, |i, j| if g.has_edge(i, j) { 1.0 } else { 0.0 });
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub const SPECTRUM_TOLERANCE: f64 = 1e-8;

/// True when the sorted adjacency spectra agree within 1e-8.
pub fn cospectral(g1: &Graph, g2: &Graph) -> bool {
    g1.n() == g2.n()
        && spectrum(g1)
            .iter()
            .zip(spectrum(g2))
            .all(|(a, b)| (a - b).abs() <= SPECTRUM_TOLERANCE)
}

const REG_N6_D3: [&[(usize, usize)]; 2] = [
    &[(0, 1), (0, 3), (0, 4), (1, 3), (1, 5), (2, 3), (2, 4), (2, 5), (4, 5)],
    &[(0, 1), (0, 3), (0, 5), (1, 2), (1, 4), (2, 3), (2, 5), (3, 4), (4, 5)],
];

const REG_N7_D4: [&str; 2] = ["F}hXw", "F}oxw"];

const REG_N8_D3: [&[(usize, usize)]; 5] = [
    &[(0, 1), (0, 2), (0, 3), (1, 4), (1, 5), (2, 4), (2, 6), (3, 5), (3, 7), (4, 7), (5, 6), (6, 7)],
    &[(0, 1), (0, 2), (0, 3), (1, 4), (1, 5), (2, 4), (2, 6), (3, 5), (3, 6), (4, 7), (5, 7), (6, 7)],
    &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 4), (2, 5), (3, 6), (3, 7), (4, 6), (4, 7), (5, 6), (5, 7)],
    &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 4), (2, 5), (3, 4), (3, 6), (4, 7), (5, 6), (5, 7), (6, 7)],
    &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 4), (3, 5), (4, 6), (4, 7), (5, 6), (5, 7), (6, 7)],
];

const REG_N8_D4: [&str; 6] = ["Gs`zro", "G}`Hxw", "G}hHg{", "G}hPW{", "G}opW{", "G~`HW{"];

const REG_N8_D5: [&str; 3] = ["G}qzp{", "G~qix{", "G~rHx{"];

/// Cospectral mate of the tesseract; nodes 0..8 and 8..16 are the two
/// sides of its bipartition.
const HOFFMAN: [(usize, usize); 32] = [
    (0, 8), (0, 10), (0, 13), (0, 15), (1, 9), (1, 10), (1, 11), (1, 15),
    (2, 8), (2, 11), (2, 12), (2, 14), (3, 9), (3, 10), (3, 11), (3, 12),
    (4, 8), (4, 11), (4, 14), (4, 15), (5, 9), (5, 13), (5, 14), (5, 15),
    (6, 8), (6, 10), (6, 12), (6, 13), (7, 9), (7, 12), (7, 13), (7, 14),
];

pub const BUILTIN_SETS: [&str; 8] = [
    "RegN6D3",
    "RegN7D4",
    "RegN8D3",
    "RegN8D4",
    "RegN8D5",
    "Q4",
    "Hoffman",
    "Q4vsHoffman",
];

/// The 4-dimensional hypercube: nodes are 4-bit strings, edges join
/// strings at Hamming distance 1.
pub fn hypercube(dim: u32) -> Graph {
    let n = 1usize << dim;
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (0..dim).map(move |b| (a, a ^ (1 << b))))
        .filter(|&(a, b)| a < b)
        .collect();
    Graph::from_edges(n, &edges).expect("hypercube edges are valid")
}

fn named(lists: &[&[(usize, usize)]], n: usize, family: &str) -> Vec<Graph> {
    lists
        .iter()
        .enumerate()
        .map(|(i, e)| {
            Graph::from_edges(n, e)
                .expect("builtin edge lists are valid")
                .with_name(format!("{family}-G{}", i + 1))
        })
        .collect()
}

fn from_graph6(lines: &[&str], family: &str) -> Vec<Graph> {
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            parse_graph6(l)
                .expect("builtin graph6 strings are valid")
                .with_name(format!("{family}-G{}", i + 1))
        })
        .collect()
}

/// Hard-coded graph families by name (see [`BUILTIN_SETS`]).
pub fn builtin_graphs(name: &str) -> Result<Vec<Graph>> {
    let q4 = || hypercube(4).with_name("Q4");
    let hoffman = || Graph::from_edges(16, &HOFFMAN).expect("valid").with_name("Hoffman");
    Ok(match name {
        "RegN6D3" => named(&REG_N6_D3, 6, name),
        "RegN7D4" => from_graph6(&REG_N7_D4, name),
        "RegN8D3" => named(&REG_N8_D3, 8, name),
        "RegN8D4" => from_graph6(&REG_N8_D4, name),
        "RegN8D5" => from_graph6(&REG_N8_D5, name),
        "Q4" => vec![q4()],
        "Hoffman" => vec![hoffman()],
        "Q4vsHoffman" => vec![q4(), hoffman()],
        other => return Err(Error::UnknownGraphSet(other.to_string())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeparationNorm {
    #[default]
    MaxAbs,
    L2,
}

impl SeparationNorm {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match self {
            SeparationNorm::MaxAbs => diffs.fold(0.0, f64::max),
            SeparationNorm::L2 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
        }
    }
}

/// Untrained-network settings for separation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoConfig {
    pub d_hidden: usize,
    pub n_heads: usize,
    /// Shared `d_k = d_v = d_r`.
    pub d_key: usize,
    pub n_layers: usize,
    pub radius: Radius,
    pub histogram_k: usize,
    /// Feed `ln(1 + count)` instead of raw walk counts.
    pub log_counts: bool,
    pub score_map: ScoreMap,
    pub threshold: f64,
    pub norm: SeparationNorm,
}

impl Default for IsoConfig {
    fn default() -> Self {
        Self {
            d_hidden: 8,
            n_heads: 4,
            d_key: 2,
            n_layers: 1,
            radius: Radius::Ball(8),
            histogram_k: 4,
            log_counts: true,
            score_map: ScoreMap::Sigmoid,
            threshold: 1e-4,
            norm: SeparationNorm::MaxAbs,
        }
    }
}

impl IsoConfig {
    pub fn route_spec(&self) -> RouteFeatureSpec {
        RouteFeatureSpec {
            log_counts: self.log_counts,
            ..RouteFeatureSpec::histogram(self.histogram_k)
        }
    }

    pub fn model_config(&self) -> InformerConfig {
        let attention = AttentionConfig::uniform(self.n_heads, self.d_key, self.score_map, self.radius);
        let mut cfg = InformerConfig::tied(
            self.n_layers,
            self.d_hidden,
            self.n_heads,
            attention,
            self.histogram_k,
            HeadKind::NodeRegression,
        );
        cfg.route_spec = Some(self.route_spec());
        cfg
    }
}

/// Sum-readout embedding of every graph under one untrained model.
pub fn embeddings(graphs: &[Graph], cfg: &IsoConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    let spec = cfg.route_spec();
    let routes: Vec<RouteTensor> = graphs.iter().map(|g| spec.build(g)).collect::<Result<_>>()?;
    let stripped: Vec<Graph> = graphs.iter().map(|g| Graph::from_edges(g.n(), &g.edges())).collect::<Result<_>>()?;
    let model = InformerModel::new(cfg.model_config(), seed)?;
    let b = batch(&stripped, &routes, true)?;
    let h = model.hidden_states(&b)?;
    let (n, d) = (b.n_max, cfg.d_hidden);
    Ok(b.node_counts
        .iter()
        .enumerate()
        .map(|(s, &count)| {
            let mut sum = vec![0.0; d];
            for i in 0..count {
                for (acc, x) in sum.iter_mut().zip(&h.data()[(s * n + i) * d..(s * n + i + 1) * d]) {
                    *acc += x;
                }
            }
            sum
        })
        .collect())
}

/// One separation row. A graph counts as separated when the network tells it
/// apart from every other graph of the set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub set: String,
    pub graphs: usize,
    pub pairs: usize,
    pub wl_pairs_separated: usize,
    pub wl_graphs_separated: usize,
    pub gi_pairs_separated: usize,
    pub gi_graphs_separated: usize,
    /// Smallest embedding distance over all pairs.
    pub min_distance: f64,
    pub threshold: f64,
    pub norm: SeparationNorm,
    pub score_map: ScoreMap,
    pub histogram_k: usize,
    pub seed: u64,
}

impl SeparationReport {
    pub fn all_separated(&self) -> bool {
        self.gi_graphs_separated == self.graphs
    }

    /// `"5 / 5 - 100%"`.
    pub fn fraction(&self) -> String {
        let pct = if self.graphs == 0 {
            100.0
        } else {
            100.0 * self.gi_graphs_separated as f64 / self.graphs as f64
        };
        format!("{} / {} - {pct:.0}%", self.gi_graphs_separated, self.graphs)
    }
}

impl fmt::Display for SeparationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<14} {:>14} {:>10} {:>10} {:>12.3e}",
            self.set,
            self.fraction(),
            format!("{} / {}", self.wl_pairs_separated, self.pairs),
            format!("{} / {}", self.gi_pairs_separated, self.pairs),
            self.min_distance
        )
    }
}

pub const REPORT_HEADER: &str = "set                 separated   WL pairs   GI pairs  min distance";

fn graphs_apart(k: usize, separated: impl Fn(usize, usize) -> bool) -> usize {
    (0..k).filter(|&i| (0..k).all(|j| i == j || separated(i.min(j), i.max(j)))).count()
}

/// Runs the untrained network once per graph and compares sum readouts
/// pairwise; WL counts are included for reference.
pub fn gi_separate(set: &str, graphs: &[Graph], cfg: &IsoConfig, seed: u64) -> Result<SeparationReport> {
    if graphs.is_empty() {
        return Err(Error::Graph(format!("graph set `{set}` is empty")));
    }
    let emb = embeddings(graphs, cfg, seed)?;
    let k = graphs.len();
    let mut dist = vec![vec![0.0; k]; k];
    let mut wl = vec![vec![false; k]; k];
    let mut min_distance = f64::INFINITY;
    for i in 0..k {
        for j in i + 1..k {
            dist[i][j] = cfg.norm.distance(&emb[i], &emb[j]);
            min_distance = min_distance.min(dist[i][j]);
            wl[i][j] = wl_distinguish(&graphs[i], &graphs[j]) == WlVerdict::Separated;
        }
    }
    let pairs = k * (k - 1) / 2;
    let count = |f: &dyn Fn(usize, usize) -> bool| (0..k).flat_map(|i| (i + 1..k).map(move |j| (i, j))).filter(|&(i, j)| f(i, j)).count();
    let gi_sep = |i: usize, j: usize| dist[i][j] > cfg.threshold;
    let wl_sep = |i: usize, j: usize| wl[i][j];
    Ok(SeparationReport {
        set: set.to_string(),
        graphs: k,
        pairs,
        wl_pairs_separated: count(&wl_sep),
        wl_graphs_separated: graphs_apart(k, wl_sep),
        gi_pairs_separated: count(&gi_sep),
        gi_graphs_separated: graphs_apart(k, gi_sep),
        min_distance: if pairs == 0 { 0.0 } else { min_distance },
        threshold: cfg.threshold,
        norm: cfg.norm,
        score_map: cfg.score_map,
        histogram_k: cfg.histogram_k,
        seed,
    })
}
