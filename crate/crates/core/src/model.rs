//! The Graph Informer network: input embedding, stacked residual RouteMHSA
//! blocks and the node- and graph-level output heads.
//!
//! Each block computes
//!
//! ```text
//! T  = H + LayerNorm(Linear(RouteMHSA(H)))
//! H' = T + LayerNorm(FFN(T)),   FFN(x) = W₂ ReLU(W₁ x + b₁) + b₂
//! ```
//!
//! with dropout after the Linear and after the FFN. The post-norm
//! arrangement `T = LayerNorm(H + ...)` is available as
//! [`LayerStyle::PostNorm`] for comparison only; it trains poorly because the
//! normalization damps the gradient through the skip branch.

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{head_masks, route_mhsa, AttentionConfig, AttentionDump, RouteMhsaParams};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{BatchedGraphs, RouteFeatureSpec};
use crate::nn::{dropout, init_bias, init_linear, DropoutMode, LAYER_NORM_EPS};
use crate::params::{ParamId, ParamMap, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Per-node `linear → tanh → linear`.
    NodeRegression,
    /// Per-node `linear → ReLU`, mean over real nodes, `linear`.
    GraphClassification,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerStyle {
    #[default]
    Residual,
    PostNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformerConfig {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub attention: AttentionConfig,
    pub f_route: usize,
    pub f_nodes: usize,
    /// Width of the FFN's inner layer.
    pub d_ffn: usize,
    pub dropout: f64,
    #[serde(default)]
    pub dropout_mode: DropoutMode,
    pub head: HeadKind,
    pub n_tasks: usize,
    pub pool: bool,
    #[serde(default)]
    pub layer_style: LayerStyle,
    /// How route tensors were built for this model, when known.
    #[serde(default)]
    pub route_spec: Option<RouteFeatureSpec>,
}

impl InformerConfig {
    /// Tied sizes: `d_k = d_v = d_r = d_hidden / n_heads`, FFN width
    /// `d_hidden`, one shared radius, pool node on.
    pub fn tied(
        n_layers: usize,
        d_hidden: usize,
        n_heads: usize,
        attention: AttentionConfig,
        f_route: usize,
        head: HeadKind,
    ) -> Self {
        debug_assert_eq!(attention.n_heads, n_heads);
        Self {
            n_layers,
            d_hidden,
            attention,
            f_route,
            f_nodes: 1,
            d_ffn: d_hidden,
            dropout: 0.0,
            dropout_mode: DropoutMode::default(),
            head,
            n_tasks: 1,
            pool: true,
            layer_style: LayerStyle::Residual,
            route_spec: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        let sizes = [
            ("n_layers", self.n_layers),
            ("d_hidden", self.d_hidden),
            ("f_route", self.f_route),
            ("f_nodes", self.f_nodes),
            ("d_ffn", self.d_ffn),
            ("n_tasks", self.n_tasks),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be ≥ 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(spec) = &self.route_spec {
            if spec.dim() != self.f_route {
                return Err(Error::Config(format!(
                    "route_spec yields {} features but f_route is {}",
                    spec.dim(),
                    self.f_route
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    mhsa: RouteMhsaParams,
    w_out: ParamId,
    b_out: ParamId,
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct HeadParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Hidden states after the last layer plus each layer's per-head
/// attention probabilities.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub hidden: Var,
    pub probs: Vec<Vec<Var>>,
}

#[derive(Debug, Clone)]
pub struct InformerModel {
    config: InformerConfig,
    store: ParamStore,
    input: ParamId,
    pool: Option<ParamId>,
    layers: Vec<LayerParams>,
    head: HeadParams,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config: InformerConfig,
    params: ParamMap,
}

impl InformerModel {
    pub fn new(config: InformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let d = config.d_hidden;
        let mut store = ParamStore::new();
        let input = store.add("input.w", init_linear(d, config.f_nodes, rng));
        let pool = config
            .pool
            .then(|| store.add("pool.embedding", Tensor::uniform(&[d], 1.0, rng)));
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = format!("layer{l}");
            let mhsa = RouteMhsaParams::init(&mut store, &format!("{p}.mhsa"), d, config.f_route, &config.attention, rng)?;
            let cat = config.attention.output_dim();
            layers.push(LayerParams {
                mhsa,
                w_out: store.add(format!("{p}.out.w"), init_linear(d, cat, rng)),
                b_out: store.add(format!("{p}.out.b"), init_bias(d, cat, rng)),
                ln1_gamma: store.add(format!("{p}.ln1.gamma"), Tensor::full(&[d], 1.0)),
                ln1_beta: store.add(format!("{p}.ln1.beta"), Tensor::zeros(&[d])),
                ffn_w1: store.add(format!("{p}.ffn.w1"), init_linear(config.d_ffn, d, rng)),
                ffn_b1: store.add(format!("{p}.ffn.b1"), init_bias(config.d_ffn, d, rng)),
                ffn_w2: store.add(format!("{p}.ffn.w2"), init_linear(d, config.d_ffn, rng)),
                ffn_b2: store.add(format!("{p}.ffn.b2"), init_bias(d, config.d_ffn, rng)),
                ln2_gamma: store.add(format!("{p}.ln2.gamma"), Tensor::full(&[d], 1.0)),
                ln2_beta: store.add(format!("{p}.ln2.beta"), Tensor::zeros(&[d])),
            });
        }
        let head = HeadParams {
            w1: store.add("head.w1", init_linear(d, d, rng)),
            b1: store.add("head.b1", init_bias(d, d, rng)),
            w2: store.add("head.w2", init_linear(config.n_tasks, d, rng)),
            b2: store.add("head.b2", init_bias(config.n_tasks, d, rng)),
        };
        Ok(Self {
            config,
            store,
            input,
            pool,
            layers,
            head,
        })
    }

    pub fn config(&self) -> &InformerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.store.find(name)
    }

    fn check_batch(&self, batch: &BatchedGraphs) -> Result<()> {
        if batch.features_dim() != self.config.f_nodes {
            return Err(Error::shape("node features", &[self.config.f_nodes], &[batch.features_dim()]));
        }
        if batch.route_dim() != self.config.f_route {
            return Err(Error::shape("route features", &[self.config.f_route], &[batch.route_dim()]));
        }
        if batch.pool != self.config.pool {
            return Err(Error::Config(format!(
                "batch built with pool = {}, model expects pool = {}",
                batch.pool, self.config.pool
            )));
        }
        Ok(())
    }

    /// `H₀`: projected features on real nodes, the pool embedding on pool
    /// slots, zeros on padding.
    pub fn embed_inputs(&self, tape: &mut Tape, bound: &[Var], batch: &BatchedGraphs) -> Result<Var> {
        self.check_batch(batch)?;
        let x = tape.constant(batch.features.clone());
        let h = tape.linear(x, bound[self.input.index()], None)?;
        match self.pool {
            Some(p) => tape.add_rows(h, bound[p.index()], &batch.pool_rows()),
            None => Ok(h),
        }
    }

    /// One block. Returns the new hidden states and the per-head
    /// probabilities.
    #[allow(clippy::too_many_arguments)]
    fn layer_forward(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        layer: usize,
        h: Var,
        routes: Var,
        masks: &[Var],
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<(Var, Vec<Var>)> {
        let lp = &self.layers[layer];
        let p = |id: ParamId| bound[id.index()];
        let cfg = &self.config;
        let attn = route_mhsa(tape, h, routes, masks, &lp.mhsa, bound, &cfg.attention)?;
        let mut a = tape.linear(attn.out, p(lp.w_out), Some(p(lp.b_out)))?;
        if let Some(r) = rng.as_deref_mut() {
            a = dropout(tape, a, cfg.dropout, cfg.dropout_mode, true, r)?;
        }
        let t = match cfg.layer_style {
            LayerStyle::Residual => {
                let n = tape.layer_norm(a, p(lp.ln1_gamma), p(lp.ln1_beta), LAYER_NORM_EPS)?;
                tape.add(h, n)?
            }
            LayerStyle::PostNorm => {
                let s = tape.add(h, a)?;
                tape.layer_norm(s, p(lp.ln1_gamma), p(lp.ln1_beta), LAYER_NORM_EPS)?
            }
        };
        let f = tape.linear(t, p(lp.ffn_w1), Some(p(lp.ffn_b1)))?;
        let f = tape.relu(f)?;
        let mut f = tape.linear(f, p(lp.ffn_w2), Some(p(lp.ffn_b2)))?;
        if let Some(r) = rng.as_deref_mut() {
            f = dropout(tape, f, cfg.dropout, cfg.dropout_mode, true, r)?;
        }
        let out = match cfg.layer_style {
            LayerStyle::Residual => {
                let n = tape.layer_norm(f, p(lp.ln2_gamma), p(lp.ln2_beta), LAYER_NORM_EPS)?;
                tape.add(t, n)?
            }
            LayerStyle::PostNorm => {
                let s = tape.add(t, f)?;
                tape.layer_norm(s, p(lp.ln2_gamma), p(lp.ln2_beta), LAYER_NORM_EPS)?
            }
        };
        Ok((out, attn.probs))
    }

    /// Runs every block starting from `h0`. Dropout is active exactly when
    /// `rng` is given.
    pub fn trunk_from(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &BatchedGraphs,
        h0: Var,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Trunk> {
        self.check_batch(batch)?;
        let routes = tape.constant(batch.routes.clone());
        let masks = head_masks(tape, batch, &self.config.attention);
        let mut h = h0;
        let mut probs = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (next, p) = self.layer_forward(tape, bound, l, h, routes, &masks, &mut rng)?;
            h = next;
            probs.push(p);
        }
        Ok(Trunk { hidden: h, probs })
    }

    pub fn trunk(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        batch: &BatchedGraphs,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Trunk> {
        let h0 = self.embed_inputs(tape, bound, batch)?;
        self.trunk_from(tape, bound, batch, h0, rng)
    }

    /// Per-node predictions `[B, N, n_tasks]`.
    pub fn node_head(&self, tape: &mut Tape, bound: &[Var], hidden: Var) -> Result<Var> {
        let p = |id: ParamId| bound[id.index()];
        let z = tape.linear(hidden, p(self.head.w1), Some(p(self.head.b1)))?;
        let z = tape.tanh(z)?;
        tape.linear(z, p(self.head.w2), Some(p(self.head.b2)))
    }

    /// Per-graph logits `[B, n_tasks]`.
    pub fn graph_head(&self, tape: &mut Tape, bound: &[Var], hidden: Var, batch: &BatchedGraphs) -> Result<Var> {
        let p = |id: ParamId| bound[id.index()];
        let z = tape.linear(hidden, p(self.head.w1), Some(p(self.head.b1)))?;
        let z = tape.relu(z)?;
        let pooled = tape.pool_rows(z, &batch.real_node_weights(true))?;
        tape.linear(pooled, p(self.head.w2), Some(p(self.head.b2)))
    }

    /// The head selected by the config.
    pub fn head(&self, tape: &mut Tape, bound: &[Var], hidden: Var, batch: &BatchedGraphs) -> Result<Var> {
        match self.config.head {
            HeadKind::NodeRegression => self.node_head(tape, bound, hidden),
            HeadKind::GraphClassification => self.graph_head(tape, bound, hidden, batch),
        }
    }

    /// Untracked prediction: `[B, N, n_tasks]` or `[B, n_tasks]`.
    pub fn predict(&self, batch: &BatchedGraphs) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let trunk = self.trunk(&mut tape, &bound, batch, None)?;
        let out = self.head(&mut tape, &bound, trunk.hidden, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Final hidden states `[B, N, d_hidden]`.
    pub fn hidden_states(&self, batch: &BatchedGraphs) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let trunk = self.trunk(&mut tape, &bound, batch, None)?;
        Ok(tape.value(trunk.hidden).clone())
    }

    /// Attention matrices of every layer and head for sample `sample`,
    /// restricted to its real nodes and pool slot.
    pub fn attention_dump(&self, batch: &BatchedGraphs, sample: usize) -> Result<Vec<AttentionDump>> {
        if sample >= batch.batch_size {
            return Err(Error::Param(format!("sample {sample} out of range for batch of {}", batch.batch_size)));
        }
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let trunk = self.trunk(&mut tape, &bound, batch, None)?;
        let count = batch.node_counts[sample];
        let slots: Vec<usize> = (0..count).chain(batch.pool_slot()).collect();
        let node_labels: Vec<String> = (0..count)
            .map(|i| i.to_string())
            .chain(batch.pool_slot().map(|_| "pool".to_string()))
            .collect();
        let n = batch.n_max;
        let mut dumps = Vec::new();
        for (layer, heads) in trunk.probs.iter().enumerate() {
            for (head, &a) in heads.iter().enumerate() {
                let data = tape.value(a).data();
                let matrix = slots
                    .iter()
                    .map(|&i| slots.iter().map(|&j| data[(sample * n + i) * n + j]).collect())
                    .collect();
                dumps.push(AttentionDump {
                    layer,
                    head,
                    matrix,
                    node_labels: node_labels.clone(),
                    pool_index: batch.pool_slot().map(|_| count),
                });
            }
        }
        Ok(dumps)
    }

    pub fn to_checkpoint_json(&self) -> Result<String> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.store.to_map(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(json)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint version {} not supported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut model = Self::new(ck.config, 0)?;
        model.store.load_map(&ck.params)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&json)
    }
}

/// Sum of final node embeddings over real nodes, `[B, d_hidden]`.
pub fn sum_readout(tape: &mut Tape, hidden: Var, batch: &BatchedGraphs) -> Result<Var> {
    tape.pool_rows(hidden, &batch.real_node_weights(false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::ScoreMap;
    use crate::gradcheck::grad_check;
    use crate::graph::{batch, route_histogram, Graph, Radius};

    fn small_config(head: HeadKind, score_map: ScoreMap, radius: Radius) -> InformerConfig {
        InformerConfig::tied(2, 4, 2, AttentionConfig::uniform(2, 2, score_map, radius), 2, head)
    }

    fn path3() -> BatchedGraphs {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let p = route_histogram(&g, 2).unwrap();
        batch(&[g], &[p], true).unwrap()
    }

    fn zero(model: &mut InformerModel, suffixes: &[&str]) {
        let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
        for name in names.iter().filter(|n| suffixes.iter().any(|s| n.ends_with(s))) {
            let id = model.param_id(name).unwrap();
            model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }

    #[test]
    fn embedding_places_pool_vector() {
        let model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited), 1).unwrap();
        let b = path3();
        let mut tape = Tape::new();
        let bound = model.params().bind_frozen(&mut tape);
        let h0 = model.embed_inputs(&mut tape, &bound, &b).unwrap();
        let h0 = tape.value(h0);
        let pool = model.params().get(model.param_id("pool.embedding").unwrap());
        assert_eq!(&h0.data()[12..16], pool.data());
        // Constant input projects every real node to the same vector.
        assert_eq!(&h0.data()[0..4], &h0.data()[4..8]);
        assert_eq!(&h0.data()[0..4], &h0.data()[8..12]);
    }

    #[test]
    fn zero_projection_leaves_only_pool() {
        let mut model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited), 1).unwrap();
        zero(&mut model, &["input.w"]);
        let mut tape = Tape::new();
        let bound = model.params().bind_frozen(&mut tape);
        let h0 = model.embed_inputs(&mut tape, &bound, &path3()).unwrap();
        assert!(tape.value(h0).data()[..12].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn residual_blocks_are_identity_when_branches_vanish() {
        let mut model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Ball(1)), 2).unwrap();
        zero(&mut model, &["out.w", "out.b", "ffn.w2", "ffn.b2"]);
        let b = path3();
        let mut tape = Tape::new();
        let bound = model.params().bind_frozen(&mut tape);
        let h0 = model.embed_inputs(&mut tape, &bound, &b).unwrap();
        let trunk = model.trunk_from(&mut tape, &bound, &b, h0, None).unwrap();
        assert_eq!(tape.value(trunk.hidden), tape.value(h0));
    }

    #[test]
    fn zero_head_weights_predict_zero() {
        let mut model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited), 3).unwrap();
        zero(&mut model, &["head.w2", "head.b2"]);
        assert!(model.predict(&path3()).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn layer_gradient_wrt_hidden() {
        let model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited), 4).unwrap();
        let b = path3();
        let h0 = Tensor::uniform(&[1, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let report = grad_check(
            |tape, x| {
                let bound = model.params().bind_frozen(tape);
                let t = model.trunk_from(tape, &bound, &b, x[0], None)?;
                tape.sum(t.hidden)
            },
            &[h0],
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn two_layers_reach_two_hops() {
        // Without the pool the only path from node 2 to node 0 is the chain.
        let mut cfg = small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Ball(1));
        cfg.pool = false;
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]).unwrap();
        let b = batch(&[g.clone()], &[route_histogram(&g, 2).unwrap()], false).unwrap();
        let grad_at_0 = |layers: usize| {
            let mut c = cfg.clone();
            c.n_layers = layers;
            let model = InformerModel::new(c, 6).unwrap();
            let mut tape = Tape::new();
            let bound = model.params().bind_frozen(&mut tape);
            let h0 = tape.param(Tensor::uniform(&[1, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(7)));
            let t = model.trunk_from(&mut tape, &bound, &b, h0, None).unwrap();
            let w = Tensor::new(vec![1, 3], vec![0.0, 0.0, 1.0]).unwrap();
            let node2 = tape.pool_rows(t.hidden, &w).unwrap();
            // A plain channel sum is blind to LayerNorm branches.
            let probe = tape.constant(Tensor::uniform(&[1, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(8)));
            let weighted = tape.mul(node2, probe).unwrap();
            let loss = tape.sum(weighted).unwrap();
            tape.backward(loss).unwrap();
            tape.grad(h0).unwrap()[..4].iter().map(|x| x.abs()).fold(0.0, f64::max)
        };
        assert_eq!(grad_at_0(1), 0.0);
        assert!(grad_at_0(2) > 1e-8);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let model = InformerModel::new(small_config(HeadKind::GraphClassification, ScoreMap::Sigmoid, Radius::Ball(2)), 8).unwrap();
        let json = model.to_checkpoint_json().unwrap();
        let back = InformerModel::from_checkpoint_json(&json).unwrap();
        assert_eq!(back.params(), model.params());
        assert_eq!(back.config(), model.config());
        let b = path3();
        assert_eq!(back.predict(&b).unwrap(), model.predict(&b).unwrap());
    }

    #[test]
    fn checkpoint_version_is_checked() {
        let model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited), 8).unwrap();
        let json = model.to_checkpoint_json().unwrap().replacen("\"version\":1", "\"version\":99", 1);
        assert!(matches!(InformerModel::from_checkpoint_json(&json), Err(Error::Config(_))));
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let mut cfg = small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited);
        cfg.f_route = 3;
        let model = InformerModel::new(cfg, 9).unwrap();
        assert!(matches!(model.predict(&path3()), Err(Error::Shape { .. })));
    }

    #[test]
    fn invalid_config() {
        let mut cfg = small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited);
        cfg.n_layers = 0;
        assert!(InformerModel::new(cfg.clone(), 0).is_err());
        cfg.n_layers = 1;
        cfg.dropout = 1.0;
        assert!(InformerModel::new(cfg, 0).is_err());
    }

    #[test]
    fn dump_covers_every_head() {
        let model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Softmax, Radius::Unlimited), 10).unwrap();
        let dumps = model.attention_dump(&path3(), 0).unwrap();
        assert_eq!(dumps.len(), 4);
        for d in &dumps {
            assert_eq!(d.pool_index, Some(3));
            assert_eq!(d.node_labels.last().unwrap(), "pool");
            for row in &d.matrix {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sum_readout_matches_loop() {
        let b = path3();
        let h = Tensor::uniform(&[1, 4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(11));
        let mut tape = Tape::new();
        let hv = tape.constant(h.clone());
        let s = sum_readout(&mut tape, hv, &b).unwrap();
        for c in 0..3 {
            let want: f64 = (0..3).map(|i| h.at(&[0, i, c])).sum();
            assert!((tape.value(s).data()[c] - want).abs() < 1e-15);
        }
    }
}
