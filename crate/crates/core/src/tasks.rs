//! Synthetic datasets with brute-force-checkable labels, and the on-disk
//! dataset format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{shortest_distances, Graph, GraphDoc};
use crate::model::HeadKind;

/// One labeled graph. Node tasks store `n × n_tasks` targets row-major,
/// graph tasks `n_tasks`; `mask` has the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub graph: Graph,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: HeadKind,
    pub n_tasks: usize,
    pub samples: Vec<Sample>,
}

#[derive(Serialize, Deserialize)]
struct TargetsFile {
    task: HeadKind,
    n_tasks: usize,
    targets: Vec<Vec<f64>>,
    mask: Vec<Vec<bool>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let want = match self.task {
                HeadKind::NodeRegression => s.graph.n() * self.n_tasks,
                HeadKind::GraphClassification => self.n_tasks,
            };
            if s.targets.len() != want || s.mask.len() != want {
                return Err(Error::Config(format!(
                    "sample {i}: {} targets / {} mask entries, expected {want}",
                    s.targets.len(),
                    s.mask.len()
                )));
            }
        }
        Ok(())
    }

    /// Splits off the first `n` samples.
    pub fn split(mut self, n: usize) -> (Dataset, Dataset) {
        let rest = self.samples.split_off(n.min(self.samples.len()));
        let tail = Dataset {
            task: self.task,
            n_tasks: self.n_tasks,
            samples: rest,
        };
        (self, tail)
    }

    /// Writes `graphs/NNNNN.json` documents and `targets.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let graphs = dir.join("graphs");
        std::fs::create_dir_all(&graphs).map_err(|e| Error::io(&graphs, e))?;
        for (i, s) in self.samples.iter().enumerate() {
            let path = graphs.join(format!("{i:05}.json"));
            let doc = serde_json::to_string(&GraphDoc::from_graph(&s.graph))?;
            std::fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
        }
        let file = TargetsFile {
            task: self.task,
            n_tasks: self.n_tasks,
            targets: self.samples.iter().map(|s| s.targets.clone()).collect(),
            mask: self.samples.iter().map(|s| s.mask.clone()).collect(),
        };
        let path = dir.join("targets.json");
        std::fs::write(&path, serde_json::to_string(&file)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let path = dir.join("targets.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: TargetsFile = serde_json::from_str(&text)?;
        if file.targets.len() != file.mask.len() {
            return Err(Error::Config(format!(
                "{}: {} target rows but {} mask rows",
                path.display(),
                file.targets.len(),
                file.mask.len()
            )));
        }
        let mut samples = Vec::with_capacity(file.targets.len());
        for (i, (targets, mask)) in file.targets.into_iter().zip(file.mask).enumerate() {
            let gpath = dir.join("graphs").join(format!("{i:05}.json"));
            let doc = std::fs::read_to_string(&gpath).map_err(|e| Error::io(&gpath, e))?;
            let doc: GraphDoc = serde_json::from_str(&doc)?;
            samples.push(Sample {
                graph: doc.to_graph()?,
                targets,
                mask,
            });
        }
        let ds = Dataset {
            task: file.task,
            n_tasks: file.n_tasks,
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Erdős–Rényi `G(n, p)` with `n` uniform in `[5, 12]`, redrawn until
/// connected.
pub fn random_connected_graph(rng: &mut impl Rng, p: f64) -> Graph {
    loop {
        let n = rng.gen_range(5..=12);
        let mut edges = Vec::new();
        for a in 0..n {
            for b in a + 1..n {
                if rng.gen_bool(p) {
                    edges.push((a, b));
                }
            }
        }
        let g = Graph::from_edges(n, &edges).expect("generated edges are valid");
        if g.is_connected() {
            return g;
        }
    }
}

/// Number of nodes within shortest-path distance 2, the node itself
/// included.
pub fn two_hop_counts(g: &Graph) -> Vec<f64> {
    let d = shortest_distances(g);
    (0..g.n())
        .map(|v| (0..g.n()).filter(|&u| d.get(v, u) <= 2).count() as f64)
        .collect()
}

/// True when some pair of distinct nodes has two common neighbors, which
/// is exactly when the graph contains a 4-cycle.
pub fn has_four_cycle(g: &Graph) -> bool {
    (0..g.n()).any(|a| (a + 1..g.n()).any(|b| g.neighbors(a).filter(|&x| g.has_edge(x, b)).count() >= 2))
}

pub const SYNTH_EDGE_PROB: f64 = 0.3;

/// Node regression: per-node count of nodes within distance 2.
pub fn synth_node_task(n_graphs: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_graphs)
        .map(|_| {
            let graph = random_connected_graph(&mut rng, SYNTH_EDGE_PROB);
            let targets = two_hop_counts(&graph);
            let mask = vec![true; targets.len()];
            Sample { graph, targets, mask }
        })
        .collect();
    Dataset {
        task: HeadKind::NodeRegression,
        n_tasks: 1,
        samples,
    }
}

/// Graph classification: does the graph contain a 4-cycle.
pub fn synth_graph_task(n_graphs: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_graphs)
        .map(|_| {
            let graph = random_connected_graph(&mut rng, SYNTH_EDGE_PROB);
            let label = if has_four_cycle(&graph) { 1.0 } else { 0.0 };
            Sample {
                graph,
                targets: vec![label],
                mask: vec![true],
            }
        })
        .collect();
    Dataset {
        task: HeadKind::GraphClassification,
        n_tasks: 1,
        samples,
    }
}
