use graph_informer::attention::{AttentionConfig, ScoreMap};
use graph_informer::autodiff::Tape;
use graph_informer::graph::{batch, Graph, Radius, RouteFeatureSpec};
use graph_informer::model::{sum_readout, HeadKind, InformerConfig, InformerModel};
use graph_informer::tensor::Tensor;
use graph_informer::train::{loss_grad_check, prepare, train, LabeledBatch, Metric, Prepared, TrainConfig};
use graph_informer::tasks::{synth_graph_task, synth_node_task, Dataset, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Graph {
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
        .filter(|_| rng.gen_bool(p))
        .collect();
    Graph::from_edges(n, &edges).unwrap()
}

fn shuffle(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    perm
}

fn spec() -> RouteFeatureSpec {
    RouteFeatureSpec {
        log_counts: true,
        ..RouteFeatureSpec::histogram(3)
    }
}

fn small_config(head: HeadKind, score_map: ScoreMap, radius: Radius) -> InformerConfig {
    let attention = AttentionConfig::uniform(2, 4, score_map, radius);
    InformerConfig::tied(2, 8, 2, attention, spec().dim(), head)
}

fn prepared(graphs: Vec<Graph>, head: HeadKind, rng: &mut ChaCha8Rng) -> Vec<Prepared> {
    let samples = graphs
        .into_iter()
        .map(|graph| {
            let len = match head {
                HeadKind::NodeRegression => graph.n(),
                HeadKind::GraphClassification => 1,
            };
            let targets = (0..len)
                .map(|_| match head {
                    HeadKind::NodeRegression => rng.gen_range(-2.0..2.0),
                    HeadKind::GraphClassification => f64::from(rng.gen_bool(0.5)),
                })
                .collect();
            Sample { graph, targets, mask: vec![true; len] }
        })
        .collect();
    let ds = Dataset { task: head, n_tasks: 1, samples };
    prepare(&ds, &spec(), false).unwrap()
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graphs = vec![random_graph(5, 0.5, &mut rng), random_graph(3, 0.7, &mut rng)];
    for head in [HeadKind::NodeRegression, HeadKind::GraphClassification] {
        for score_map in [ScoreMap::Softmax, ScoreMap::Sigmoid] {
            let data = prepared(graphs.clone(), head, &mut rng);
            let refs: Vec<&Prepared> = data.iter().collect();
            let lb = LabeledBatch::new(&refs, head, 1, true).unwrap();
            let model = InformerModel::new(small_config(head, score_map, Radius::Ball(2)), 11).unwrap();
            let report = loss_grad_check(&model, &lb).unwrap();
            assert!(report.max_rel_error < 1e-4, "{head:?} {score_map:?}: {report:?}");
            assert_eq!(report.coordinates, model.params().tensors().iter().map(Tensor::len).sum::<usize>());
        }
    }
}

#[test]
fn outputs_respect_node_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let sp = spec();
    for trial in 0..100u64 {
        let n = rng.gen_range(2..=9);
        let g = random_graph(n, 0.4, &mut rng);
        let perm = shuffle(n, &mut rng);
        let h = g.permuted(&perm).unwrap();
        let score_map = if trial % 2 == 0 { ScoreMap::Softmax } else { ScoreMap::Sigmoid };
        let radius = [Radius::Unlimited, Radius::Ball(1), Radius::Ball(2)][trial as usize % 3];
        let bg = batch(&[g.clone()], &[sp.build(&g).unwrap()], true).unwrap();
        let bh = batch(&[h.clone()], &[sp.build(&h).unwrap()], true).unwrap();

        let node = InformerModel::new(small_config(HeadKind::NodeRegression, score_map, radius), trial).unwrap();
        let (pg, ph) = (node.predict(&bg).unwrap(), node.predict(&bh).unwrap());
        for i in 0..n {
            let diff = (pg.data()[i] - ph.data()[perm[i]]).abs();
            assert!(diff < 1e-9, "trial {trial}: node {i} moved by {diff}");
        }

        let graph = InformerModel::new(small_config(HeadKind::GraphClassification, score_map, radius), trial).unwrap();
        let diff = (graph.predict(&bg).unwrap().data()[0] - graph.predict(&bh).unwrap().data()[0]).abs();
        assert!(diff < 1e-9, "trial {trial}: graph head moved by {diff}");

        let readout = |b| {
            let mut tape = Tape::new();
            let bound = node.params().bind(&mut tape);
            let trunk = node.trunk(&mut tape, &bound, b, None).unwrap();
            let r = sum_readout(&mut tape, trunk.hidden, b).unwrap();
            tape.value(r).clone()
        };
        let (rg, rh) = (readout(&bg), readout(&bh));
        let diff = rg.data().iter().zip(rh.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9, "trial {trial}: readout moved by {diff}");
    }
}

#[test]
fn masked_targets_never_reach_loss_or_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let graphs = vec![random_graph(6, 0.5, &mut rng), random_graph(4, 0.6, &mut rng)];
    for head in [HeadKind::NodeRegression, HeadKind::GraphClassification] {
        let mut data = prepared(graphs.clone(), head, &mut rng);
        if head == HeadKind::NodeRegression {
            data[0].mask[1] = false;
            data[1].mask[3] = false;
        } else {
            data[1].mask[0] = false;
        }
        let refs: Vec<&Prepared> = data.iter().collect();
        let clean = LabeledBatch::new(&refs, head, 1, true).unwrap();
        let mut dirty = clean.clone();
        for (t, &m) in dirty.targets.data_mut().iter_mut().zip(&clean.mask) {
            if !m {
                *t = rng.gen_range(-1e6..1e6);
            }
        }
        let model = InformerModel::new(small_config(head, ScoreMap::Softmax, Radius::Ball(2)), 3).unwrap();
        let run = |lb: &LabeledBatch| {
            let mut tape = Tape::new();
            let bound = model.params().bind(&mut tape);
            let trunk = model.trunk(&mut tape, &bound, &lb.batch, None).unwrap();
            let out = model.head(&mut tape, &bound, trunk.hidden, &lb.batch).unwrap();
            let loss = match head {
                HeadKind::NodeRegression => tape.masked_mae(out, &lb.targets, &lb.mask),
                HeadKind::GraphClassification => tape.masked_bce(out, &lb.targets, &lb.mask),
            }
            .unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).data()[0], model.params().collect_grads(&tape, &bound))
        };
        let (l1, g1) = run(&clean);
        let (l2, g2) = run(&dirty);
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }
}

#[test]
fn training_is_deterministic_under_a_seed() {
    let sp = spec();
    for (ds, metric) in [(synth_node_task(30, 2), Metric::Mae), (synth_graph_task(40, 2), Metric::AucRoc)] {
        let head = ds.task;
        let (tr, va) = ds.split(24);
        let (tr, va) = (prepare(&tr, &sp, false).unwrap(), prepare(&va, &sp, false).unwrap());
        let mut mc = small_config(head, ScoreMap::Softmax, Radius::Ball(2));
        mc.dropout = 0.1;
        let tc = TrainConfig {
            epochs: 3,
            ..TrainConfig::toy(metric, 9)
        };
        let run = || train(InformerModel::new(mc.clone(), 9).unwrap(), &tr, &va, &tc).unwrap();
        let (a, b) = (run(), run());
        let bits = |h: &[graph_informer::train::EpochRecord]| {
            h.iter().map(|r| (r.train_loss.to_bits(), r.val_metric.to_bits())).collect::<Vec<_>>()
        };
        assert_eq!(bits(&a.history), bits(&b.history));
        assert_eq!(a.best.to_checkpoint_json().unwrap(), b.best.to_checkpoint_json().unwrap());
    }
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let model = InformerModel::new(small_config(HeadKind::NodeRegression, ScoreMap::Sigmoid, Radius::Ball(1)), 4).unwrap();
    model.save(&path).unwrap();
    let back = InformerModel::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = random_graph(7, 0.4, &mut rng);
    let b = batch(&[g.clone()], &[spec().build(&g).unwrap()], true).unwrap();
    assert_eq!(model.predict(&b).unwrap(), back.predict(&b).unwrap());
}
