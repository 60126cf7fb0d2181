//! Losses, metrics and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, ScoreMap};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{batch, BatchedGraphs, Graph, Radius, RouteFeatureSpec, RouteTensor};
use crate::model::{HeadKind, InformerConfig, InformerModel};
use crate::optim::{AdamState, StepSchedule};
use crate::tasks::{synth_graph_task, synth_node_task, Dataset};
use crate::tensor::Tensor;

/// Mean `|pred − target|` over entries where `mask` is true.
pub fn masked_mae(pred: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(pred.clone());
    let l = tape.masked_mae(p, target, mask)?;
    Ok(tape.value(l).data()[0])
}

/// Mean binary cross-entropy with logits over entries where `mask` is true.
pub fn masked_cross_entropy(logits: &Tensor, target: &Tensor, mask: &[bool]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(logits.clone());
    let l = tape.masked_bce(p, target, mask)?;
    Ok(tape.value(l).data()[0])
}

/// Area under the ROC curve by the rank-sum statistic, ties counting one
/// half. `None` when only one class is present.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 || scores.len() != labels.len() {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Lower is better.
    Mae,
    /// Mean over tasks with both classes present; higher is better.
    AucRoc,
}

impl Metric {
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Mae => a < b,
            Metric::AucRoc => a > b,
        }
    }

    pub fn for_task(task: HeadKind) -> Self {
        match task {
            HeadKind::NodeRegression => Metric::Mae,
            HeadKind::GraphClassification => Metric::AucRoc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub batch_size: usize,
    pub metric: Metric,
    pub seed: u64,
}

impl TrainConfig {
    /// 100 epochs, decay ×0.3 at epochs 40 and 70, lr 1e-3, batch 16.
    pub fn toy(metric: Metric, seed: u64) -> Self {
        Self {
            epochs: 100,
            lr: 1e-3,
            decay_epochs: vec![40, 70],
            decay_factor: 0.3,
            batch_size: 16,
            metric,
            seed,
        }
    }

    pub fn schedule(&self) -> Result<StepSchedule> {
        StepSchedule::new(self.lr, self.decay_epochs.clone(), self.decay_factor)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.schedule().map(|_| ())
    }
}

/// A sample with its route tensor computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub graph: Graph,
    pub routes: RouteTensor,
    pub targets: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Builds route features for every sample; `zero_routes` keeps the
/// feature width but zeroes every entry (the route ablation).
pub fn prepare(ds: &Dataset, spec: &RouteFeatureSpec, zero_routes: bool) -> Result<Vec<Prepared>> {
    ds.validate()?;
    ds.samples
        .iter()
        .map(|s| {
            let mut routes = spec.build(&s.graph)?;
            if zero_routes {
                routes = routes.zeroed();
            }
            Ok(Prepared {
                graph: s.graph.clone(),
                routes,
                targets: s.targets.clone(),
                mask: s.mask.clone(),
            })
        })
        .collect()
}

/// Padded batch plus dense targets and the loss mask. Node targets are
/// `[B, N, T]`, graph targets `[B, T]`; pool and padding are never masked
/// in.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub batch: BatchedGraphs,
    pub targets: Tensor,
    pub mask: Vec<bool>,
}

impl LabeledBatch {
    pub fn new(samples: &[&Prepared], task: HeadKind, n_tasks: usize, pool: bool) -> Result<Self> {
        let graphs: Vec<Graph> = samples.iter().map(|s| s.graph.clone()).collect();
        let routes: Vec<RouteTensor> = samples.iter().map(|s| s.routes.clone()).collect();
        let b = batch(&graphs, &routes, pool)?;
        let (targets, mask) = match task {
            HeadKind::NodeRegression => {
                let n = b.n_max;
                let mut t = Tensor::zeros(&[b.batch_size, n, n_tasks]);
                let mut m = vec![false; t.len()];
                for (s, smp) in samples.iter().enumerate() {
                    let len = smp.graph.n() * n_tasks;
                    let off = s * n * n_tasks;
                    t.data_mut()[off..off + len].copy_from_slice(&smp.targets);
                    m[off..off + len].copy_from_slice(&smp.mask);
                }
                (t, m)
            }
            HeadKind::GraphClassification => {
                let data: Vec<f64> = samples.iter().flat_map(|s| s.targets.iter().copied()).collect();
                let m = samples.iter().flat_map(|s| s.mask.iter().copied()).collect();
                (Tensor::new(vec![b.batch_size, n_tasks], data)?, m)
            }
        };
        Ok(Self { batch: b, targets, mask })
    }
}

/// Loss of `model` on one batch, on a fresh tape, dropout driven by `rng`.
fn batch_loss(
    model: &InformerModel,
    tape: &mut Tape,
    bound: &[crate::autodiff::Var],
    lb: &LabeledBatch,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<crate::autodiff::Var> {
    let trunk = model.trunk(tape, bound, &lb.batch, rng)?;
    let out = model.head(tape, bound, trunk.hidden, &lb.batch)?;
    match model.config().head {
        HeadKind::NodeRegression => tape.masked_mae(out, &lb.targets, &lb.mask),
        HeadKind::GraphClassification => tape.masked_bce(out, &lb.targets, &lb.mask),
    }
}

fn batches<'a>(data: &'a [Prepared], order: &[usize], size: usize) -> Vec<Vec<&'a Prepared>> {
    order.chunks(size).map(|c| c.iter().map(|&i| &data[i]).collect()).collect()
}

/// Validation metric of `model` on `data`.
pub fn evaluate(model: &InformerModel, data: &[Prepared], metric: Metric, batch_size: usize) -> Result<f64> {
    let cfg = model.config();
    let order: Vec<usize> = (0..data.len()).collect();
    let mut abs_sum = 0.0;
    let mut count = 0usize;
    let mut scores = vec![Vec::new(); cfg.n_tasks];
    let mut labels = vec![Vec::new(); cfg.n_tasks];
    for chunk in batches(data, &order, batch_size.max(1)) {
        let lb = LabeledBatch::new(&chunk, cfg.head, cfg.n_tasks, cfg.pool)?;
        let pred = model.predict(&lb.batch)?;
        for (i, ((p, t), &m)) in pred.data().iter().zip(lb.targets.data()).zip(&lb.mask).enumerate() {
            if !m {
                continue;
            }
            abs_sum += (p - t).abs();
            count += 1;
            scores[i % cfg.n_tasks].push(*p);
            labels[i % cfg.n_tasks].push(*t > 0.5);
        }
    }
    if count == 0 {
        return Err(Error::Loss("no labeled entries to evaluate".into()));
    }
    match metric {
        Metric::Mae => Ok(abs_sum / count as f64),
        Metric::AucRoc => {
            let aucs: Vec<f64> = scores.iter().zip(&labels).filter_map(|(s, l)| auc_roc(s, l)).collect();
            if aucs.is_empty() {
                return Err(Error::Loss("AUC undefined: every task has a single class".into()));
            }
            Ok(aucs.iter().sum::<f64>() / aucs.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean training loss over the epoch's labeled entries.
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation metric.
    pub best: InformerModel,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
}

/// Adam over shuffled mini-batches for `cfg.epochs` epochs, keeping the
/// parameters with the best validation metric.
pub fn train(mut model: InformerModel, train: &[Prepared], val: &[Prepared], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let schedule = cfg.schedule()?;
    let mc = model.config().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params().tensors(), cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, InformerModel)> = None;
    for epoch in 0..cfg.epochs {
        adam.learning_rate = schedule.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut labeled = 0usize;
        for (batch_idx, chunk) in batches(train, &order, cfg.batch_size).into_iter().enumerate() {
            let lb = LabeledBatch::new(&chunk, mc.head, mc.n_tasks, mc.pool)?;
            let n_labeled = lb.mask.iter().filter(|&&m| m).count();
            if n_labeled == 0 {
                continue;
            }
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let diverged = |e: Error| match e {
                Error::NonFinite { .. } => Error::Diverged { epoch, batch: batch_idx },
                other => other,
            };
            let dropout_rng: Option<&mut dyn rand::RngCore> = if mc.dropout > 0.0 { Some(&mut rng) } else { None };
            let loss = batch_loss(&model, &mut tape, &bound, &lb, dropout_rng).map_err(diverged)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_idx });
            }
            tape.backward(loss).map_err(diverged)?;
            let grads = model.params().collect_grads(&tape, &bound);
            adam.step(model.params_mut().tensors_mut(), &grads)?;
            loss_sum += value * n_labeled as f64;
            labeled += n_labeled;
        }
        let val_metric = evaluate(&model, val, cfg.metric, cfg.batch_size)?;
        history.push(EpochRecord {
            epoch,
            lr: adam.learning_rate,
            train_loss: loss_sum / labeled.max(1) as f64,
            val_metric,
        });
        if best.as_ref().map_or(true, |(_, m, _)| cfg.metric.better(val_metric, *m)) {
            best = Some((epoch, val_metric, model.clone()));
        }
    }
    let (best_epoch, best_metric, best) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_metric,
        history,
    })
}

/// Tape gradient vs central differences of the batch loss, over every
/// model parameter.
pub fn loss_grad_check(model: &InformerModel, lb: &LabeledBatch) -> Result<GradCheckReport> {
    grad_check(|tape, vars| batch_loss(model, tape, vars, lb, None), model.params().tensors())
}

/// One end-to-end gradient check of [`grad_check_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub head: HeadKind,
    pub score_map: ScoreMap,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate, and its flat index.
    pub worst_param: String,
    pub worst_index: usize,
}

/// Checks the loss gradient of a small model for both heads and both
/// score maps on a two-graph batch (5 and 4 nodes) drawn from `seed`.
pub fn grad_check_suite(seed: u64, n_layers: usize, d_hidden: usize, n_heads: usize) -> Result<Vec<GradCase>> {
    if n_heads == 0 || d_hidden % n_heads != 0 {
        return Err(Error::Config(format!("d_hidden {d_hidden} must be a multiple of n_heads {n_heads}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs: Vec<Graph> = [5, 4]
        .iter()
        .map(|&n| {
            let edges: Vec<(usize, usize)> = (0..n)
                .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
                .filter(|_| rng.gen_bool(0.5))
                .collect();
            Graph::from_edges(n, &edges)
        })
        .collect::<Result<_>>()?;
    let spec = RouteFeatureSpec {
        log_counts: true,
        ..RouteFeatureSpec::histogram(3)
    };
    let mut cases = Vec::new();
    for head in [HeadKind::NodeRegression, HeadKind::GraphClassification] {
        let samples: Vec<Prepared> = graphs
            .iter()
            .map(|g| {
                let targets: Vec<f64> = match head {
                    HeadKind::NodeRegression => (0..g.n()).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                    HeadKind::GraphClassification => vec![f64::from(rng.gen_bool(0.5))],
                };
                Ok(Prepared {
                    graph: g.clone(),
                    routes: spec.build(g)?,
                    mask: vec![true; targets.len()],
                    targets,
                })
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Prepared> = samples.iter().collect();
        let lb = LabeledBatch::new(&refs, head, 1, true)?;
        for score_map in [ScoreMap::Softmax, ScoreMap::Sigmoid] {
            let attention = AttentionConfig::uniform(n_heads, d_hidden / n_heads, score_map, Radius::Ball(2));
            let mut mc = InformerConfig::tied(n_layers, d_hidden, n_heads, attention, spec.dim(), head);
            mc.route_spec = Some(spec.clone());
            let model = InformerModel::new(mc, seed)?;
            let report = loss_grad_check(&model, &lb)?;
            let (param, index) = report.worst;
            cases.push(GradCase {
                head,
                score_map,
                coordinates: report.coordinates,
                max_rel_error: report.max_rel_error,
                worst_param: model.params().iter().nth(param).map_or_else(String::new, |(n, _)| n.to_string()),
                worst_index: index,
            });
        }
    }
    Ok(cases)
}

/// Route features for the toy tasks: `log1p` walk counts up to length 4.
pub fn toy_route_spec() -> RouteFeatureSpec {
    RouteFeatureSpec {
        log_counts: true,
        ..RouteFeatureSpec::histogram(4)
    }
}

/// Two layers, width 48, six heads of size 8, radius-2 balls.
pub fn toy_model_config(head: HeadKind) -> InformerConfig {
    let attention = AttentionConfig::uniform(6, 8, ScoreMap::Softmax, Radius::Ball(2));
    let spec = toy_route_spec();
    let mut cfg = InformerConfig::tied(2, 48, 6, attention, spec.dim(), head);
    cfg.route_spec = Some(spec);
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyOptions {
    pub task: HeadKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    /// Zero every route feature (the ablation).
    pub zero_routes: bool,
}

impl ToyOptions {
    pub fn new(task: HeadKind, seed: u64) -> Self {
        Self {
            task,
            seed,
            n_train: 500,
            n_val: 100,
            epochs: 100,
            zero_routes: false,
        }
    }

    pub fn dataset(&self) -> Dataset {
        let n = self.n_train + self.n_val;
        match self.task {
            HeadKind::NodeRegression => synth_node_task(n, self.seed),
            HeadKind::GraphClassification => synth_graph_task(n, self.seed),
        }
    }
}

/// JSON run report; `checkpoint` is filled in by whoever saves the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: HeadKind,
    pub seed: u64,
    pub zero_routes: bool,
    pub n_train: usize,
    pub n_val: usize,
    pub model: InformerConfig,
    pub train: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Lowest epoch-mean training loss.
    pub min_train_loss: f64,
    pub checkpoint: Option<String>,
}

/// Generates the synthetic split, trains the toy model and reports.
pub fn run_toy(opts: &ToyOptions) -> Result<(InformerModel, RunReport)> {
    let (tr, va) = opts.dataset().split(opts.n_train);
    run_toy_on(opts, &tr, &va)
}

/// Trains the toy model on given splits; `opts.n_train` and `opts.n_val`
/// are ignored.
pub fn run_toy_on(opts: &ToyOptions, train_set: &Dataset, val_set: &Dataset) -> Result<(InformerModel, RunReport)> {
    for ds in [train_set, val_set] {
        if ds.task != opts.task || ds.n_tasks != 1 {
            return Err(Error::Config(format!(
                "dataset holds a {:?} task with {} targets; expected {:?} with 1",
                ds.task, ds.n_tasks, opts.task
            )));
        }
    }
    let spec = toy_route_spec();
    let tr = prepare(train_set, &spec, opts.zero_routes)?;
    let va = prepare(val_set, &spec, opts.zero_routes)?;
    let mc = toy_model_config(opts.task);
    let tc = TrainConfig {
        epochs: opts.epochs,
        ..TrainConfig::toy(Metric::for_task(opts.task), opts.seed)
    };
    let model = InformerModel::new(mc.clone(), opts.seed)?;
    let out = train(model, &tr, &va, &tc)?;
    let min_train_loss = out.history.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    let report = RunReport {
        task: opts.task,
        seed: opts.seed,
        zero_routes: opts.zero_routes,
        n_train: tr.len(),
        n_val: va.len(),
        model: mc,
        train: tc,
        history: out.history,
        best_epoch: out.best_epoch,
        best_metric: out.best_metric,
        min_train_loss,
        checkpoint: None,
    };
    Ok((out.best, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        let t = Tensor::vector(vec![1.0, 2.0]);
        assert_eq!(masked_mae(&t, &t, &[true, true]).unwrap(), 0.0);
        let p = Tensor::vector(vec![2.0, 1.0]);
        assert_eq!(masked_mae(&p, &t, &[true, true]).unwrap(), 1.0);
        assert!(matches!(masked_mae(&p, &t, &[false, false]), Err(Error::Loss(_))));
    }

    #[test]
    fn cross_entropy_examples() {
        let one = Tensor::vector(vec![1.0]);
        let l = masked_cross_entropy(&Tensor::vector(vec![0.0]), &one, &[true]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = masked_cross_entropy(&Tensor::vector(vec![40.0]), &one, &[true]).unwrap();
        assert!(l >= 0.0 && l < 1e-17);
        let l = masked_cross_entropy(&Tensor::vector(vec![-800.0]), &one, &[true]).unwrap();
        assert!((l - 800.0).abs() < 1e-9);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_roc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc_roc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc_roc(&[0.5; 6], &[true, false, true, false, false, true]), Some(0.5));
        assert_eq!(auc_roc(&[0.1, 0.2], &[true, true]), None);
        // One tie across classes: 3 of 4 pairs ordered, one half.
        assert_eq!(auc_roc(&[0.1, 0.5, 0.5, 0.9], &[false, false, true, true]), Some(0.875));
    }

    #[test]
    fn auc_matches_pair_counting() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        let scores: Vec<f64> = (0..200).map(|_| (rng.gen_range(0..20) as f64) / 4.0).collect();
        let labels: Vec<bool> = (0..200).map(|_| rng.gen_bool(0.4)).collect();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                if labels[i] && !labels[j] {
                    den += 1.0;
                    num += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        assert!((auc_roc(&scores, &labels).unwrap() - num / den).abs() < 1e-12);
    }

    #[test]
    fn auc_of_independent_labels_is_near_half() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        // Standard error ≈ √(1/(3n)) ≈ 0.004.
        assert!((auc_roc(&scores, &labels).unwrap() - 0.5).abs() < 0.015);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::toy(Metric::Mae, 0);
        assert!(c.validate().is_ok());
        c.decay_factor = 1.0;
        assert!(c.validate().is_err());
        c = TrainConfig::toy(Metric::Mae, 0);
        c.epochs = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn schedule_after_second_milestone() {
        let s = TrainConfig::toy(Metric::Mae, 0).schedule().unwrap();
        assert_eq!(s.lr_at(71), 1e-3 * 0.3 * 0.3);
        assert_eq!(s.lr_at(39), 1e-3);
        assert_eq!(s.lr_at(40), 1e-3 * 0.3);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(
            scores in proptest::collection::vec(-5.0f64..5.0, 2..40),
            seed in 0u64..1000,
        ) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = scores.iter().map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let a = auc_roc(&scores, &labels).unwrap();
            let mapped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(a, auc_roc(&mapped, &labels).unwrap());
        }
    }
}
