//! Route-based multi-head self-attention.
//!
//! For each head the attention logits combine a node term and a route term,
//!
//! ```text
//! S = (Q Kᵀ + Q_R ⊗ K_R) / √(d_k + d_r) + M,   (Q_R ⊗ K_R)[k,l] = Q_R[k] · K_R[k,l]
//! ```
//!
//! with `Q, K, V, Q_R` projected from the hidden states and `K_R, V_R`
//! projected from the route tensor. Scores are mapped to probabilities by a
//! row softmax, or by an elementwise sigmoid in the injective variant, and
//! the head output is `A V + einsum(kl,klv->kv, A, V_R)`. Head outputs are
//! concatenated in head order.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{BatchedGraphs, Radius};
use crate::nn::init_linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMap {
    #[default]
    Softmax,
    /// Elementwise sigmoid: the injective variant.
    Sigmoid,
}

impl std::str::FromStr for ScoreMap {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(ScoreMap::Softmax),
            "sigmoid" | "injective" => Ok(ScoreMap::Sigmoid),
            other => Err(Error::Config(format!("unknown score map `{other}` (softmax | sigmoid)"))),
        }
    }
}

impl std::fmt::Display for ScoreMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScoreMap::Softmax => "softmax",
            ScoreMap::Sigmoid => "sigmoid",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_r: usize,
    pub score_map: ScoreMap,
    /// One entry per head.
    pub radius: Vec<Radius>,
}

impl AttentionConfig {
    /// `n_heads` heads with `d_k = d_v = d_r = d` sharing one radius.
    pub fn uniform(n_heads: usize, d: usize, score_map: ScoreMap, radius: Radius) -> Self {
        Self {
            n_heads,
            d_k: d,
            d_v: d,
            d_r: d,
            score_map,
            radius: vec![radius; n_heads],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_k == 0 || self.d_v == 0 || self.d_r == 0 {
            return Err(Error::Config(format!(
                "attention sizes must be ≥ 1 (heads {}, d_k {}, d_v {}, d_r {})",
                self.n_heads, self.d_k, self.d_v, self.d_r
            )));
        }
        if self.radius.len() != self.n_heads {
            return Err(Error::Config(format!(
                "{} radii given for {} heads",
                self.radius.len(),
                self.n_heads
            )));
        }
        Ok(())
    }

    pub fn output_dim(&self) -> usize {
        self.n_heads * self.d_v
    }

    pub fn scale(&self) -> f64 {
        1.0 / ((self.d_k + self.d_r) as f64).sqrt()
    }
}

/// Parameter handles of one head.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_q_route: ParamId,
    pub w_k_route: ParamId,
    pub w_v_route: ParamId,
}

#[derive(Debug, Clone)]
pub struct RouteMhsaParams {
    pub heads: Vec<HeadParams>,
    pub d_model: usize,
    pub f_route: usize,
}

impl RouteMhsaParams {
    /// Registers all head projections in `store` under `prefix`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        f_route: usize,
        cfg: &AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if d_model == 0 || f_route == 0 {
            return Err(Error::Config(format!("d_model {d_model} and F_route {f_route} must be ≥ 1")));
        }
        let heads = (0..cfg.n_heads)
            .map(|h| {
                let mut add = |name: &str, out: usize, inp: usize| {
                    store.add(format!("{prefix}.head{h}.{name}"), init_linear(out, inp, rng))
                };
                HeadParams {
                    w_q: add("w_q", cfg.d_k, d_model),
                    w_k: add("w_k", cfg.d_k, d_model),
                    w_v: add("w_v", cfg.d_v, d_model),
                    w_q_route: add("w_q_route", cfg.d_r, d_model),
                    w_k_route: add("w_k_route", cfg.d_r, f_route),
                    w_v_route: add("w_v_route", cfg.d_v, f_route),
                }
            })
            .collect();
        Ok(Self {
            heads,
            d_model,
            f_route,
        })
    }
}

/// Output of [`route_mhsa`]: the concatenated heads and each head's
/// attention probabilities `[B, N, N]`.
#[derive(Debug, Clone)]
pub struct MhsaOutput {
    pub out: Var,
    pub probs: Vec<Var>,
}

/// Per-head additive masks `M_route(radius) + M_node`, shared between heads
/// with equal radius.
pub fn head_masks(tape: &mut Tape, batch: &BatchedGraphs, cfg: &AttentionConfig) -> Vec<Var> {
    let mut cache: BTreeMap<String, Var> = BTreeMap::new();
    cfg.radius
        .iter()
        .map(|r| {
            *cache
                .entry(format!("{r:?}"))
                .or_insert_with(|| tape.constant(batch.attention_mask(*r)))
        })
        .collect()
}

/// RouteMHSA on the tape. `h: [B, N, d]`, `routes: [B, N, N, F_route]`,
/// `masks`: one `[B, N, N]` additive mask per head.
pub fn route_mhsa(
    tape: &mut Tape,
    h: Var,
    routes: Var,
    masks: &[Var],
    params: &RouteMhsaParams,
    bound: &[Var],
    cfg: &AttentionConfig,
) -> Result<MhsaOutput> {
    if masks.len() != params.heads.len() || cfg.n_heads != params.heads.len() {
        return Err(Error::Config(format!(
            "{} masks / {} parameter heads for {} configured heads",
            masks.len(),
            params.heads.len(),
            cfg.n_heads
        )));
    }
    let p = |id: ParamId| bound[id.index()];
    let mut outs = Vec::with_capacity(cfg.n_heads);
    let mut probs = Vec::with_capacity(cfg.n_heads);
    for (head, &mask) in params.heads.iter().zip(masks) {
        let q = tape.linear(h, p(head.w_q), None)?;
        let k = tape.linear(h, p(head.w_k), None)?;
        let v = tape.linear(h, p(head.w_v), None)?;
        let qr = tape.linear(h, p(head.w_q_route), None)?;
        let kr = tape.linear(routes, p(head.w_k_route), None)?;
        let vr = tape.linear(routes, p(head.w_v_route), None)?;
        let s = tape.route_scores(q, k, qr, kr, cfg.scale())?;
        let s = tape.add(s, mask)?;
        let a = match cfg.score_map {
            ScoreMap::Softmax => tape.softmax(s)?,
            ScoreMap::Sigmoid => tape.sigmoid(s)?,
        };
        outs.push(tape.route_attn(a, v, vr)?);
        probs.push(a);
    }
    let out = tape.concat(&outs)?;
    Ok(MhsaOutput { out, probs })
}

/// Untracked RouteMHSA over a batch: returns the concatenated head outputs
/// `[B, N, n_heads·d_v]` and the per-head probabilities.
pub fn route_mhsa_forward(
    h: &Tensor,
    batch: &BatchedGraphs,
    store: &ParamStore,
    params: &RouteMhsaParams,
    cfg: &AttentionConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = store.bind_frozen(&mut tape);
    let hv = tape.constant(h.clone());
    let rv = tape.constant(batch.routes.clone());
    let masks = head_masks(&mut tape, batch, cfg);
    let out = route_mhsa(&mut tape, hv, rv, &masks, params, &bound, cfg)?;
    let probs = out.probs.iter().map(|&a| tape.value(a).clone()).collect();
    Ok((tape.value(out.out).clone(), probs))
}

/// Scaled route-aware logits plus an optional additive mask.
pub fn route_scores(q: &Tensor, k: &Tensor, qr: &Tensor, kr: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let d_k = q.last_dim();
    let d_r = qr.last_dim();
    let mut tape = Tape::new();
    let vars = [q, k, qr, kr].map(|t| tape.constant(t.clone()));
    let mut s = tape.route_scores(vars[0], vars[1], vars[2], vars[3], 1.0 / ((d_k + d_r) as f64).sqrt())?;
    if let Some(m) = mask {
        let m = tape.constant(m.clone());
        s = tape.add(s, m)?;
    }
    Ok(tape.value(s).clone())
}

pub fn attention_probs(scores: &Tensor, score_map: ScoreMap) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let a = match score_map {
        ScoreMap::Softmax => tape.softmax(s)?,
        ScoreMap::Sigmoid => tape.sigmoid(s)?,
    };
    Ok(tape.value(a).clone())
}

pub fn route_attn(a: &Tensor, v: &Tensor, vr: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vars = [a, v, vr].map(|t| tape.constant(t.clone()));
    let out = tape.route_attn(vars[0], vars[1], vars[2])?;
    Ok(tape.value(out).clone())
}

/// One head's attention matrix for one graph, as written by the dump
/// facility. Rows are attending nodes, columns attended nodes; the pool
/// slot, when present, is the last row and column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub layer: usize,
    pub head: usize,
    pub matrix: Vec<Vec<f64>>,
    pub node_labels: Vec<String>,
    pub pool_index: Option<usize>,
}

impl AttentionDump {
    /// Plain-text table, probabilities to three decimals.
    pub fn to_table(&self) -> String {
        let width = self.node_labels.iter().map(String::len).max().unwrap_or(1).max(5);
        let mut s = format!("layer {} head {}\n{:>width$}", self.layer, self.head, "");
        for l in &self.node_labels {
            s.push_str(&format!(" {l:>width$}"));
        }
        s.push('\n');
        for (label, row) in self.node_labels.iter().zip(&self.matrix) {
            s.push_str(&format!("{label:>width$}"));
            for v in row {
                s.push_str(&format!(" {v:>width$.3}"));
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::MASK_VALUE;
    use crate::graph::{batch, route_histogram, Graph};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::uniform(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn route_term_vanishes_with_zero_route_keys() {
        let (q, k, qr) = (rnd(&[4, 3], 1), rnd(&[4, 3], 2), rnd(&[4, 2], 3));
        let s = route_scores(&q, &k, &qr, &Tensor::zeros(&[4, 4, 2]), None).unwrap();
        let mut expected = q.matmul(&k.transpose().unwrap()).unwrap();
        expected.data_mut().iter_mut().for_each(|x| *x /= 5f64.sqrt());
        assert!(s.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn node_term_vanishes_with_zero_queries() {
        let (qr, kr) = (rnd(&[3, 2], 4), rnd(&[3, 3, 2], 5));
        let z = Tensor::zeros(&[3, 2]);
        let s = route_scores(&z, &z, &qr, &kr, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..2).map(|c| qr.at(&[i, c]) * kr.at(&[i, j, c])).sum();
                assert!((s.at(&[i, j]) - dot / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn scores_match_double_loop() {
        let (n, dk, dr) = (5, 3, 4);
        let (q, k, qr, kr) = (rnd(&[n, dk], 6), rnd(&[n, dk], 7), rnd(&[n, dr], 8), rnd(&[n, n, dr], 9));
        let m = rnd(&[n, n], 10);
        let s = route_scores(&q, &k, &qr, &kr, Some(&m)).unwrap();
        let scale = 1.0 / ((dk + dr) as f64).sqrt();
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for c in 0..dk {
                    acc += q.at(&[i, c]) * k.at(&[j, c]);
                }
                for c in 0..dr {
                    acc += qr.at(&[i, c]) * kr.at(&[i, j, c]);
                }
                assert!((s.at(&[i, j]) - (scale * acc + m.at(&[i, j]))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probabilities() {
        let s = Tensor::new(vec![1, 3], vec![0.0, 0.0, MASK_VALUE]).unwrap();
        let a = attention_probs(&s, ScoreMap::Softmax).unwrap();
        assert_eq!(&a.data()[..2], &[0.5, 0.5]);
        assert!(a.data()[2] <= 1e-300);
        let a = attention_probs(&s, ScoreMap::Sigmoid).unwrap();
        assert_eq!(a.data(), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn route_attn_identity_cases() {
        let v = rnd(&[3, 2], 11);
        let out = route_attn(&Tensor::identity(3), &v, &Tensor::zeros(&[3, 3, 2])).unwrap();
        assert_eq!(out, v);
        let vr = rnd(&[3, 3, 2], 12);
        let out = route_attn(&Tensor::identity(3), &Tensor::zeros(&[3, 2]), &vr).unwrap();
        for k in 0..3 {
            for c in 0..2 {
                assert_eq!(out.at(&[k, c]), vr.at(&[k, k, c]));
            }
        }
    }

    #[test]
    fn route_attn_matches_triple_loop() {
        let n = 4;
        let (a, v, vr) = (rnd(&[n, n], 13), rnd(&[n, 3], 14), rnd(&[n, n, 3], 15));
        let out = route_attn(&a, &v, &vr).unwrap();
        for k in 0..n {
            for c in 0..3 {
                let mut acc = 0.0;
                for l in 0..n {
                    acc += a.at(&[k, l]) * (v.at(&[l, c]) + vr.at(&[k, l, c]));
                }
                assert!((out.at(&[k, c]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = Tensor::zeros(&[3, 2]);
        assert!(route_scores(&q, &Tensor::zeros(&[3, 3]), &q, &Tensor::zeros(&[3, 3, 2]), None).is_err());
        assert!(route_scores(&q, &q, &q, &Tensor::zeros(&[3, 2, 2]), None).is_err());
        assert!(route_attn(&Tensor::zeros(&[3, 3]), &q, &Tensor::zeros(&[3, 3, 3])).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttentionConfig::uniform(2, 4, ScoreMap::Softmax, Radius::Ball(2));
        assert!(cfg.validate().is_ok());
        cfg.radius.pop();
        assert!(cfg.validate().is_err());
        assert!(AttentionConfig::uniform(0, 4, ScoreMap::Softmax, Radius::Unlimited).validate().is_err());
        assert_eq!("sigmoid".parse::<ScoreMap>().unwrap(), ScoreMap::Sigmoid);
        assert!("relu".parse::<ScoreMap>().is_err());
    }

    /// One head, d_k = d_v = d_r = 1, two connected nodes, one route
    /// feature, every weight set by hand.
    #[test]
    fn hand_computed_single_head() {
        let g = Graph::from_edges(2, &[(0, 1)]).unwrap();
        let p = route_histogram(&g, 1).unwrap();
        let b = batch(&[g], &[p], false).unwrap();
        let cfg = AttentionConfig::uniform(1, 1, ScoreMap::Softmax, Radius::Unlimited);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = RouteMhsaParams::init(&mut store, "a", 1, 1, &cfg, &mut rng).unwrap();
        let hp = params.heads[0];
        for (id, w) in [
            (hp.w_q, 1.0),
            (hp.w_k, 2.0),
            (hp.w_v, 3.0),
            (hp.w_q_route, 0.5),
            (hp.w_k_route, 4.0),
            (hp.w_v_route, -1.0),
        ] {
            store.get_mut(id).data_mut()[0] = w;
        }
        let h = Tensor::new(vec![1, 2, 1], vec![1.0, -1.0]).unwrap();
        let (out, _) = route_mhsa_forward(&h, &b, &store, &params, &cfg).unwrap();
        // Pencil and paper, scale 1/√2:
        //   q = h, k = 2h, v = 3h, q_r = h/2, k_r = 4·P, v_r = −P, P = [[0,1],[1,0]]
        //   S[0] = [(1·2 + 0)/√2, (1·(−2) + 0.5·4)/√2] = [√2, 0]
        //   S[1] = [((−1)·2 + (−0.5)·4)/√2, ((−1)(−2) + 0)/√2] = [−2√2, √2]
        //   out[0] = a00·3 + a01·(−3 − 1),  a0 = softmax([√2, 0])
        //   out[1] = a10·(3 − 1) + a11·(−3), a1 = softmax([−2√2, √2])
        let r2 = 2f64.sqrt();
        let a01 = 1.0 / (1.0 + r2.exp());
        let a00 = 1.0 - a01;
        let a10 = 1.0 / (1.0 + (3.0 * r2).exp());
        let a11 = 1.0 - a10;
        let expected = [a00 * 3.0 - a01 * 4.0, a10 * 2.0 - a11 * 3.0];
        for (o, e) in out.data().iter().zip(expected) {
            assert!((o - e).abs() < 1e-14, "{o} vs {e}");
        }
    }

    #[test]
    fn dump_table_renders() {
        let d = AttentionDump {
            layer: 0,
            head: 1,
            matrix: vec![vec![0.25, 0.75], vec![1.0, 0.0]],
            node_labels: vec!["0".into(), "pool".into()],
            pool_index: Some(1),
        };
        let t = d.to_table();
        assert!(t.contains("layer 0 head 1"));
        assert!(t.contains("0.750"));
    }
}
