//! Command-line front end. Tables go to stdout, JSON reports to the path
//! given by `--report`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::attention::{AttentionDump, ScoreMap};
use crate::error::{Error, Result};
use crate::graph::graph6::{encode_graph6, parse_graph6, parse_graph6_lines};
use crate::graph::{batch, load_graph_json, Graph};
use crate::iso::{
    builtin_graphs, cospectral, gi_separate, wl_distinguish, wl_refine, IsoConfig, SeparationNorm, SeparationReport,
    WlVerdict, BUILTIN_SETS, REPORT_HEADER,
};
use crate::model::{HeadKind, InformerModel};
use crate::tasks::{synth_graph_task, synth_node_task, Dataset};
use crate::train::{
    evaluate, grad_check_suite, prepare, run_toy, run_toy_on, GradCase, Metric, ToyOptions,
};

macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        writeln!(std::io::stdout(), $($arg)*).map_err(|e| Error::io("<stdout>", e))?
    }};
}

/// Failure bound of the `gradcheck` subcommand.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Builtin families run by `iso-test` when no set is given.
pub const DEFAULT_ISO_SETS: [&str; 3] = ["RegN6D3", "RegN8D3", "Q4vsHoffman"];

#[derive(Debug, Parser)]
#[command(
    name = "graph-informer",
    version,
    about = "Route-based graph attention: isomorphism tests, gradient checks and toy training"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Separate regular-graph families with an untrained network
    IsoTest(IsoTestArgs),
    /// Finite-difference check of end-to-end gradients; fails at max relative error >= 1e-4
    Gradcheck(GradcheckArgs),
    /// Train the toy model on a synthetic task and write a checkpoint and report
    TrainToy(TrainToyArgs),
    /// Print every head's attention matrix for one graph
    AttnDump(AttnDumpArgs),
    /// Compare graphs by 1-dimensional Weisfeiler-Lehman refinement and spectra
    WlCompare(WlCompareArgs),
    /// Evaluate a checkpoint on a dataset directory or a synthetic task
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreChoice {
    Softmax,
    Sigmoid,
    /// Run softmax and sigmoid one after the other
    Both,
}

impl ScoreChoice {
    fn maps(self) -> Vec<ScoreMap> {
        match self {
            ScoreChoice::Softmax => vec![ScoreMap::Softmax],
            ScoreChoice::Sigmoid => vec![ScoreMap::Sigmoid],
            ScoreChoice::Both => vec![ScoreMap::Softmax, ScoreMap::Sigmoid],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormChoice {
    MaxAbs,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskChoice {
    /// Per-node count of nodes within distance 2 (regression, MAE)
    Node,
    /// Does the graph contain a 4-cycle (classification, AUC-ROC)
    Graph,
}

impl From<TaskChoice> for HeadKind {
    fn from(t: TaskChoice) -> Self {
        match t {
            TaskChoice::Node => HeadKind::NodeRegression,
            TaskChoice::Graph => HeadKind::GraphClassification,
        }
    }
}

#[derive(Debug, Args)]
pub struct IsoTestArgs {
    /// Builtin graph set, repeatable [default: RegN6D3, RegN8D3, Q4vsHoffman]
    #[arg(long = "set", value_name = "NAME")]
    pub sets: Vec<String>,
    /// graph6 file with one graph per line, repeatable; the file stem names the set
    #[arg(long = "graph6", value_name = "FILE")]
    pub graph6: Vec<PathBuf>,
    /// Seed of the first untrained network
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds, starting at --seed
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Embeddings further apart than this count as separated
    #[arg(long, default_value_t = 1e-4)]
    pub threshold: f64,
    #[arg(long, value_enum, default_value_t = ScoreChoice::Sigmoid)]
    pub score_map: ScoreChoice,
    /// Route histogram length
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    /// Feed raw walk counts instead of ln(1 + count)
    #[arg(long)]
    pub raw_counts: bool,
    #[arg(long, value_enum, default_value_t = NormChoice::MaxAbs)]
    pub norm: NormChoice,
    /// Write the JSON report here
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
    /// Exit nonzero unless every set is fully separated on every seed
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for the graphs, targets and weights
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 8)]
    pub hidden: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    /// Write the JSON report here
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(value_enum)]
    pub task: TaskChoice,
    /// Seed for data generation, initialization, shuffling and dropout
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 500)]
    pub n_train: usize,
    #[arg(long, default_value_t = 100)]
    pub n_val: usize,
    /// Zero every route feature
    #[arg(long)]
    pub ablation: bool,
    /// Dataset directory with `train/` and `val/` subdirectories, used instead of generated data
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Also write the generated splits to DIR/train and DIR/val
    #[arg(long, value_name = "DIR")]
    pub export_data: Option<PathBuf>,
    /// Output directory for checkpoint.json and report.json [default: toy-<task>-seed<seed>]
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttnDumpArgs {
    /// Trained checkpoint; without it an untrained isomorphism-test network is used
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Seed of the untrained network
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Score map of the untrained network
    #[arg(long, default_value_t = ScoreMap::Sigmoid)]
    pub score_map: ScoreMap,
    /// Graph as a graph6 string, or a path to a graph6 or JSON graph file [default: K3]
    #[arg(long, value_name = "GRAPH")]
    pub graph: Option<String>,
    /// Only this layer
    #[arg(long)]
    pub layer: Option<usize>,
    /// Only this head
    #[arg(long)]
    pub head: Option<usize>,
    /// Write the JSON dump here
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WlCompareArgs {
    /// Graphs as graph6 strings or paths to graph6/JSON files
    #[arg(value_name = "GRAPH")]
    pub graphs: Vec<String>,
    /// Add a builtin graph set, repeatable
    #[arg(long = "set", value_name = "NAME")]
    pub sets: Vec<String>,
    /// Write the JSON report here
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Dataset directory (graphs/ plus targets.json)
    #[arg(long, value_name = "DIR", conflicts_with = "synth")]
    pub data: Option<PathBuf>,
    /// Evaluate on a freshly generated synthetic task instead
    #[arg(long, value_enum)]
    pub synth: Option<TaskChoice>,
    /// Graphs to generate with --synth
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Seed for --synth
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Zero every route feature
    #[arg(long)]
    pub ablation: bool,
    /// Write the JSON report here
    #[arg(long, value_name = "PATH")]
    pub report: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::IsoTest(a) => iso_test(&a),
        Command::Gradcheck(a) => gradcheck(&a),
        Command::TrainToy(a) => train_toy(&a),
        Command::AttnDump(a) => attn_dump(&a),
        Command::WlCompare(a) => wl_compare(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// A graph6 string, or a file holding graph6 (first line) or a JSON graph
/// document.
pub fn load_graph_arg(arg: &str) -> Result<Graph> {
    let path = Path::new(arg);
    if !path.exists() {
        return parse_graph6(arg);
    }
    let text = read(path)?;
    if text.trim_start().starts_with('{') {
        return load_graph_json(&text);
    }
    let line = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with(">>"))
        .ok_or_else(|| Error::Graph(format!("{arg}: no graph6 line found")))?;
    parse_graph6(line)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SetSummary {
    pub set: String,
    pub score_map: ScoreMap,
    pub seeds: u64,
    /// Seeds on which every graph of the set was separated.
    pub seeds_fully_separated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IsoTestReport {
    pub config: IsoConfig,
    pub score_maps: Vec<ScoreMap>,
    pub seeds: Vec<u64>,
    pub runs: Vec<SeparationReport>,
    pub summary: Vec<SetSummary>,
}

fn iso_test(a: &IsoTestArgs) -> Result<()> {
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    if !(a.threshold > 0.0) {
        return Err(Error::Config(format!("--threshold {} must be positive", a.threshold)));
    }
    if a.k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let mut sets: Vec<(String, Vec<Graph>)> = Vec::new();
    let names: Vec<&str> = if a.sets.is_empty() && a.graph6.is_empty() {
        DEFAULT_ISO_SETS.to_vec()
    } else {
        a.sets.iter().map(String::as_str).collect()
    };
    for name in names {
        let graphs = builtin_graphs(name).map_err(|_| {
            Error::Config(format!("unknown graph set `{name}` (choose from {})", BUILTIN_SETS.join(", ")))
        })?;
        sets.push((name.to_string(), graphs));
    }
    for path in &a.graph6 {
        let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let graphs = parse_graph6_lines(&read(path)?)?;
        sets.push((name, graphs));
    }
    let base = IsoConfig {
        histogram_k: a.k,
        log_counts: !a.raw_counts,
        threshold: a.threshold,
        norm: match a.norm {
            NormChoice::MaxAbs => SeparationNorm::MaxAbs,
            NormChoice::L2 => SeparationNorm::L2,
        },
        ..IsoConfig::default()
    };
    let seeds: Vec<u64> = (a.seed..a.seed + a.seeds).collect();
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for score_map in a.score_map.maps() {
        let cfg = IsoConfig { score_map, ..base.clone() };
        out!(
            "score map {score_map}, k {}, {} counts, threshold {:e}, norm {}",
            cfg.histogram_k,
            if cfg.log_counts { "log" } else { "raw" },
            cfg.threshold,
            match cfg.norm {
                SeparationNorm::MaxAbs => "max-abs",
                SeparationNorm::L2 => "l2",
            }
        );
        out!("{:>5}  {REPORT_HEADER}", "seed");
        for (name, graphs) in &sets {
            let mut full = 0;
            for &seed in &seeds {
                let r = gi_separate(name, graphs, &cfg, seed)?;
                out!("{seed:>5}  {r}");
                full += u64::from(r.all_separated());
                runs.push(r);
            }
            summary.push(SetSummary {
                set: name.clone(),
                score_map,
                seeds: a.seeds,
                seeds_fully_separated: full,
            });
        }
        out!();
    }
    if a.seeds > 1 {
        for s in &summary {
            out!("{:<14} {}: fully separated on {} / {} seeds", s.set, s.score_map, s.seeds_fully_separated, s.seeds);
        }
    }
    let report = IsoTestReport {
        config: base,
        score_maps: a.score_map.maps(),
        seeds,
        runs,
        summary,
    };
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    if a.strict {
        if let Some(s) = report.summary.iter().find(|s| s.seeds_fully_separated < s.seeds) {
            return Err(Error::Check(format!(
                "{} ({}) fully separated on only {} / {} seeds",
                s.set, s.score_map, s.seeds_fully_separated, s.seeds
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub tolerance: f64,
    pub cases: Vec<GradCase>,
    pub max_rel_error: f64,
}

fn head_name(h: HeadKind) -> &'static str {
    match h {
        HeadKind::NodeRegression => "node",
        HeadKind::GraphClassification => "graph",
    }
}

fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cases = grad_check_suite(a.seed, a.layers, a.hidden, a.heads)?;
    out!("head   score map  coordinates  max rel. error  worst parameter");
    for c in &cases {
        out!(
            "{:<6} {:<10} {:>11} {:>15.3e}  {}[{}]",
            head_name(c.head),
            c.score_map.to_string(),
            c.coordinates,
            c.max_rel_error,
            c.worst_param,
            c.worst_index
        );
    }
    let max_rel_error = cases.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    out!("max rel. error {max_rel_error:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    if let Some(path) = &a.report {
        let report = GradcheckReport {
            seed: a.seed,
            layers: a.layers,
            hidden: a.hidden,
            heads: a.heads,
            tolerance: GRADCHECK_TOLERANCE,
            cases,
            max_rel_error,
        };
        write_json(path, &report)?;
    }
    if !(max_rel_error < GRADCHECK_TOLERANCE) {
        return Err(Error::Check(format!(
            "max relative gradient error {max_rel_error:.3e} is not below {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

fn train_toy(a: &TrainToyArgs) -> Result<()> {
    let task = HeadKind::from(a.task);
    let opts = ToyOptions {
        epochs: a.epochs,
        n_train: a.n_train,
        n_val: a.n_val,
        zero_routes: a.ablation,
        ..ToyOptions::new(task, a.seed)
    };
    let out_dir = a.out.clone().unwrap_or_else(|| {
        let name = match a.task {
            TaskChoice::Node => "node",
            TaskChoice::Graph => "graph",
        };
        PathBuf::from(format!("toy-{name}-seed{}", a.seed))
    });
    let (model, mut report) = match &a.data {
        Some(dir) => {
            let tr = Dataset::load(&dir.join("train"))?;
            let va = Dataset::load(&dir.join("val"))?;
            run_toy_on(&opts, &tr, &va)?
        }
        None => {
            if let Some(dir) = &a.export_data {
                let (tr, va) = opts.dataset().split(opts.n_train);
                tr.save(&dir.join("train"))?;
                va.save(&dir.join("val"))?;
            }
            run_toy(&opts)?
        }
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let checkpoint = out_dir.join("checkpoint.json");
    model.save(&checkpoint)?;
    report.checkpoint = Some(checkpoint.display().to_string());
    let metric = match report.train.metric {
        Metric::Mae => "val MAE",
        Metric::AucRoc => "val AUC",
    };
    out!("epoch        lr  train loss  {metric:>10}");
    for r in &report.history {
        out!("{:>5} {:>9.2e} {:>11.5} {:>11.5}", r.epoch, r.lr, r.train_loss, r.val_metric);
    }
    out!(
        "best epoch {} with {metric} {:.5}; checkpoint {}",
        report.best_epoch,
        report.best_metric,
        checkpoint.display()
    );
    write_json(&out_dir.join("report.json"), &report)
}

fn attn_dump(a: &AttnDumpArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(path) => InformerModel::load(path)?,
        None => InformerModel::new(
            IsoConfig {
                score_map: a.score_map,
                ..IsoConfig::default()
            }
            .model_config(),
            a.seed,
        )?,
    };
    let g = match &a.graph {
        Some(arg) => load_graph_arg(arg)?,
        None => Graph::from_edges(3, &[(0, 1), (1, 2), (0, 2)])?,
    };
    let spec = model.config().route_spec.clone().ok_or_else(|| {
        Error::Config("checkpoint does not record its route features (route_spec); retrain to dump".into())
    })?;
    let g = if g.node_features().is_some() && model.config().f_nodes == 1 {
        Graph::from_edges(g.n(), &g.edges())?
    } else {
        g
    };
    let b = batch(&[g.clone()], &[spec.build(&g)?], model.config().pool)?;
    let dumps: Vec<AttentionDump> = model
        .attention_dump(&b, 0)?
        .into_iter()
        .filter(|d| a.layer.map_or(true, |l| d.layer == l) && a.head.map_or(true, |h| d.head == h))
        .collect();
    if dumps.is_empty() {
        return Err(Error::Config("no layer/head matches the --layer/--head filter".into()));
    }
    for d in &dumps {
        out!("{}", d.to_table());
    }
    if let Some(path) = &a.report {
        write_json(path, &dumps)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WlGraphSummary {
    pub label: String,
    pub n: usize,
    pub edges: usize,
    pub graph6: String,
    pub wl_iterations: usize,
    /// Sizes of the stable color classes, ascending.
    pub wl_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WlPair {
    pub a: String,
    pub b: String,
    pub wl: WlVerdict,
    pub cospectral: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WlCompareReport {
    pub graphs: Vec<WlGraphSummary>,
    pub pairs: Vec<WlPair>,
}

fn wl_compare(a: &WlCompareArgs) -> Result<()> {
    let mut graphs: Vec<(String, Graph)> = Vec::new();
    for arg in &a.graphs {
        graphs.push((arg.clone(), load_graph_arg(arg)?));
    }
    for name in &a.sets {
        for (i, g) in builtin_graphs(name)?.into_iter().enumerate() {
            graphs.push((format!("{name}[{i}]"), g));
        }
    }
    if graphs.len() < 2 {
        return Err(Error::Config("wl-compare needs at least two graphs".into()));
    }
    let summaries: Vec<WlGraphSummary> = graphs
        .iter()
        .map(|(label, g)| {
            let c = wl_refine(g, g.n());
            Ok(WlGraphSummary {
                label: label.clone(),
                n: g.n(),
                edges: g.edge_count(),
                graph6: encode_graph6(g)?,
                wl_iterations: c.iterations(),
                wl_classes: c.class_sizes(c.iterations()),
            })
        })
        .collect::<Result<_>>()?;
    out!("graph                 n  edges  WL rounds  stable classes");
    for s in &summaries {
        out!("{:<20} {:>2} {:>6} {:>10}  {:?}", s.label, s.n, s.edges, s.wl_iterations, s.wl_classes);
    }
    out!();
    let mut pairs = Vec::new();
    let mut separated = 0;
    for i in 0..graphs.len() {
        for j in i + 1..graphs.len() {
            let wl = wl_distinguish(&graphs[i].1, &graphs[j].1);
            separated += usize::from(wl == WlVerdict::Separated);
            let pair = WlPair {
                a: graphs[i].0.clone(),
                b: graphs[j].0.clone(),
                wl,
                cospectral: graphs[i].1.n() == graphs[j].1.n() && cospectral(&graphs[i].1, &graphs[j].1),
            };
            out!(
                "{:<20} {:<20} {:<18} {}",
                pair.a,
                pair.b,
                format!("{:?}", pair.wl).to_lowercase(),
                if pair.cospectral { "cospectral" } else { "different spectra" }
            );
            pairs.push(pair);
        }
    }
    out!("WL separates {separated} / {} pairs", pairs.len());
    if let Some(path) = &a.report {
        write_json(path, &WlCompareReport { graphs: summaries, pairs })?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub dataset: String,
    pub graphs: usize,
    pub metric: Metric,
    pub value: f64,
}

fn eval(a: &EvalArgs) -> Result<()> {
    let model = InformerModel::load(&a.checkpoint)?;
    let (ds, source) = match (&a.data, a.synth) {
        (Some(dir), _) => (Dataset::load(dir)?, dir.display().to_string()),
        (None, Some(TaskChoice::Node)) => (synth_node_task(a.n, a.seed), format!("synth node, {} graphs, seed {}", a.n, a.seed)),
        (None, Some(TaskChoice::Graph)) => (synth_graph_task(a.n, a.seed), format!("synth graph, {} graphs, seed {}", a.n, a.seed)),
        (None, None) => return Err(Error::Config("eval needs --data DIR or --synth node|graph".into())),
    };
    let cfg = model.config();
    if ds.task != cfg.head || ds.n_tasks != cfg.n_tasks {
        return Err(Error::Config(format!(
            "dataset is {:?} with {} targets but the checkpoint predicts {:?} with {}",
            ds.task, ds.n_tasks, cfg.head, cfg.n_tasks
        )));
    }
    let spec = cfg.route_spec.clone().ok_or_else(|| {
        Error::Config("checkpoint does not record its route features (route_spec)".into())
    })?;
    let data = prepare(&ds, &spec, a.ablation)?;
    let metric = Metric::for_task(cfg.head);
    let value = evaluate(&model, &data, metric, 32)?;
    out!("{metric:?} {value:.6} over {} graphs ({source})", data.len());
    if let Some(path) = &a.report {
        let report = EvalReport {
            checkpoint: a.checkpoint.display().to_string(),
            dataset: source,
            graphs: data.len(),
            metric,
            value,
        };
        write_json(path, &report)?;
    }
    Ok(())
}
