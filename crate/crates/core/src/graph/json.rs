use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// On-disk JSON graph document.
///
/// ```json
/// {"name": "path3", "n": 3, "edges": [[0, 1], [1, 2]], "node_features": [[1.0], [1.0], [1.0]]}
/// ```
///
/// A dense 0/1 `adjacency` matrix may be given instead of `edges`; it must
/// be symmetric with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n: usize,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adjacency: Option<Vec<Vec<u8>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_features: Option<Vec<Vec<f64>>>,
}

impl GraphDoc {
    pub fn from_graph(g: &Graph) -> Self {
        Self {
            name: g.name().map(str::to_string),
            n: g.n(),
            edges: g.edges().into_iter().map(|(a, b)| [a, b]).collect(),
            adjacency: None,
            node_features: g.node_features().map(|x| {
                x.data().chunks(x.shape()[1].max(1)).map(<[f64]>::to_vec).collect()
            }),
        }
    }

    pub fn to_graph(&self) -> Result<Graph> {
        let mut edges: Vec<(usize, usize)> = self.edges.iter().map(|e| (e[0], e[1])).collect();
        if let Some(adj) = &self.adjacency {
            if !edges.is_empty() {
                return Err(Error::Graph("give either `edges` or `adjacency`, not both".into()));
            }
            if adj.len() != self.n || adj.iter().any(|r| r.len() != self.n) {
                return Err(Error::Graph(format!("adjacency is not {0}×{0}", self.n)));
            }
            for a in 0..self.n {
                for b in 0..self.n {
                    let v = adj[a][b];
                    if v > 1 {
                        return Err(Error::Graph(format!("adjacency entry ({a}, {b}) = {v} is not 0/1")));
                    }
                    if v != adj[b][a] {
                        return Err(Error::Graph(format!("adjacency not symmetric at ({a}, {b})")));
                    }
                    if a == b && v == 1 {
                        return Err(Error::Graph(format!("self-loop at node {a}")));
                    }
                    if a < b && v == 1 {
                        edges.push((a, b));
                    }
                }
            }
        }
        let mut g = Graph::from_edges(self.n, &edges)?;
        if let Some(rows) = &self.node_features {
            g = g.with_features(Tensor::matrix(rows).map_err(|_| Error::Graph("ragged node_features".into()))?)?;
        }
        if let Some(name) = &self.name {
            g = g.with_name(name.clone());
        }
        Ok(g)
    }
}

pub fn load_graph_json(doc: &str) -> Result<Graph> {
    serde_json::from_str::<GraphDoc>(doc)?.to_graph()
}
