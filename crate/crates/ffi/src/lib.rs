//! C ABI over `graph-informer`.
//!
//! Every fallible function returns a [`GiStatus`]; on anything but
//! `GI_STATUS_OK` a message is stored per thread and can be fetched with
//! [`gi_last_error_message`]. Handles are opaque and owned by the caller,
//! who releases them with the matching `_free` function. Strings returned
//! through `char **` out-parameters are released with [`gi_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use graph_informer::graph::graph6::{encode_graph6, parse_graph6};
use graph_informer::graph::{batch, Graph};
use graph_informer::iso::{gi_separate, wl_distinguish, IsoConfig, WlVerdict};
use graph_informer::model::{HeadKind, InformerModel};
use graph_informer::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GiStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ParseError = 3,
    IoError = 4,
    ShapeError = 5,
    NumericError = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// An undirected simple graph.
pub struct GiGraph {
    graph: Graph,
}

/// A Graph Informer model loaded from a checkpoint.
pub struct GiModel {
    model: InformerModel,
}

/// Summary of one isomorphism-separation run.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GiSeparation {
    pub graphs: usize,
    pub pairs: usize,
    pub wl_pairs_separated: usize,
    pub gi_pairs_separated: usize,
    /// Graphs told apart from every other graph of the set.
    pub gi_graphs_separated: usize,
    pub min_distance: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(err: &Error) -> GiStatus {
    match err {
        Error::Graph6 { .. } | Error::Json(_) => GiStatus::ParseError,
        Error::Io { .. } => GiStatus::IoError,
        Error::Shape { .. } => GiStatus::ShapeError,
        Error::NonFinite { .. } | Error::Diverged { .. } => GiStatus::NumericError,
        _ => GiStatus::InvalidArgument,
    }
}

struct Failure(GiStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(GiStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, records its error message and converts panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> GiStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GiStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            GiStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(GiStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn write_out<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gi_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the calling thread's last error message, or null when the last
/// call succeeded. Free with [`gi_string_free`].
#[no_mangle]
pub extern "C" fn gi_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |m| m.clone().into_raw()))
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gi_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses one graph6 line.
///
/// # Safety
/// `line` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_graph_from_graph6(line: *const c_char, out: *mut *mut GiGraph) -> GiStatus {
    guard(|| {
        let graph = parse_graph6(str_arg(line, "line")?)?;
        write_out(out, GiGraph { graph })
    })
}

/// Builds a graph from `n_edges` pairs stored flat in `edges`
/// (`2 * n_edges` entries).
///
/// # Safety
/// `edges` points to `2 * n_edges` readable values (may be null when
/// `n_edges` is 0); `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_graph_from_edges(
    n: usize,
    edges: *const usize,
    n_edges: usize,
    out: *mut *mut GiGraph,
) -> GiStatus {
    guard(|| {
        let flat: &[usize] = if n_edges == 0 {
            &[]
        } else if edges.is_null() {
            return Err(null("edges"));
        } else {
            std::slice::from_raw_parts(edges, 2 * n_edges)
        };
        let pairs: Vec<(usize, usize)> = flat.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let graph = Graph::from_edges(n, &pairs)?;
        write_out(out, GiGraph { graph })
    })
}

/// # Safety
/// `graph` is null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn gi_graph_free(graph: *mut GiGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Node count, 0 for a null handle.
///
/// # Safety
/// `graph` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gi_graph_node_count(graph: *const GiGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.graph.n())
}

/// Edge count, 0 for a null handle.
///
/// # Safety
/// `graph` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn gi_graph_edge_count(graph: *const GiGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.graph.edge_count())
}

/// Encodes as graph6; free the string with [`gi_string_free`].
///
/// # Safety
/// `graph` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_graph_to_graph6(graph: *const GiGraph, out: *mut *mut c_char) -> GiStatus {
    guard(|| {
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let s = encode_graph6(&g.graph)?;
        *out = CString::new(s).expect("graph6 is printable ASCII").into_raw();
        Ok(())
    })
}

/// Writes 1 to `separated` when 1-WL refinement tells the graphs apart,
/// else 0.
///
/// # Safety
/// `a` and `b` are live handles; `separated` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_wl_distinguish(a: *const GiGraph, b: *const GiGraph, separated: *mut c_int) -> GiStatus {
    guard(|| {
        let a = a.as_ref().ok_or_else(|| null("a"))?;
        let b = b.as_ref().ok_or_else(|| null("b"))?;
        let out = separated.as_mut().ok_or_else(|| null("separated"))?;
        *out = c_int::from(wl_distinguish(&a.graph, &b.graph) == WlVerdict::Separated);
        Ok(())
    })
}

/// Compares untrained-network embeddings of `n_graphs` graphs with the
/// default isomorphism-test configuration. `sigmoid` selects the injective
/// score map; `threshold <= 0` keeps the default 1e-4.
///
/// # Safety
/// `graphs` points to `n_graphs` live handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_iso_separate(
    graphs: *const *const GiGraph,
    n_graphs: usize,
    seed: u64,
    threshold: f64,
    sigmoid: c_int,
    out: *mut GiSeparation,
) -> GiStatus {
    guard(|| {
        if graphs.is_null() {
            return Err(null("graphs"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let handles = std::slice::from_raw_parts(graphs, n_graphs);
        let set: Vec<Graph> = handles
            .iter()
            .enumerate()
            .map(|(i, h)| h.as_ref().map(|g| g.graph.clone()).ok_or_else(|| null(&format!("graphs[{i}]"))))
            .collect::<Result<_, _>>()?;
        let mut cfg = IsoConfig::default();
        cfg.score_map = if sigmoid != 0 { "sigmoid" } else { "softmax" }.parse()?;
        if threshold > 0.0 {
            cfg.threshold = threshold;
        }
        let r = gi_separate("ffi", &set, &cfg, seed)?;
        *out = GiSeparation {
            graphs: r.graphs,
            pairs: r.pairs,
            wl_pairs_separated: r.wl_pairs_separated,
            gi_pairs_separated: r.gi_pairs_separated,
            gi_graphs_separated: r.gi_graphs_separated,
            min_distance: r.min_distance,
        };
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_model_load(path: *const c_char, out: *mut *mut GiModel) -> GiStatus {
    guard(|| {
        let model = InformerModel::load(Path::new(str_arg(path, "path")?))?;
        write_out(out, GiModel { model })
    })
}

/// Loads a checkpoint from its JSON text.
///
/// # Safety
/// `json` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_model_from_json(json: *const c_char, out: *mut *mut GiModel) -> GiStatus {
    guard(|| {
        let model = InformerModel::from_checkpoint_json(str_arg(json, "json")?)?;
        write_out(out, GiModel { model })
    })
}

/// # Safety
/// `model` is null or a live handle from this library.
#[no_mangle]
pub unsafe extern "C" fn gi_model_free(model: *mut GiModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of values [`gi_model_predict`] writes for `graph`: `n * n_tasks`
/// for node heads, `n_tasks` for graph heads.
///
/// # Safety
/// `model` and `graph` are live handles; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_model_output_len(model: *const GiModel, graph: *const GiGraph, len: *mut usize) -> GiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        *len.as_mut().ok_or_else(|| null("len"))? = output_len(&m.model, &g.graph);
        Ok(())
    })
}

fn output_len(model: &InformerModel, g: &Graph) -> usize {
    let cfg = model.config();
    match cfg.head {
        HeadKind::NodeRegression => g.n() * cfg.n_tasks,
        HeadKind::GraphClassification => cfg.n_tasks,
    }
}

/// Runs the model on one graph. Node heads write row-major `n × n_tasks`,
/// graph heads `n_tasks` logits. `written` receives the required length
/// even when `capacity` is too small.
///
/// # Safety
/// `model` and `graph` are live handles; `values` has room for `capacity`
/// doubles; `written` is writable.
#[no_mangle]
pub unsafe extern "C" fn gi_model_predict(
    model: *const GiModel,
    graph: *const GiGraph,
    values: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> GiStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let g = graph.as_ref().ok_or_else(|| null("graph"))?;
        let written = written.as_mut().ok_or_else(|| null("written"))?;
        let cfg = m.model.config();
        let need = output_len(&m.model, &g.graph);
        *written = need;
        if capacity < need {
            return Err(Failure(
                GiStatus::BufferTooSmall,
                format!("output needs {need} values, buffer holds {capacity}"),
            ));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        let spec = cfg.route_spec.clone().ok_or_else(|| {
            Failure(GiStatus::InvalidArgument, "checkpoint does not record its route features".into())
        })?;
        let bare = Graph::from_edges(g.graph.n(), &g.graph.edges())?;
        let b = batch(&[bare.clone()], &[spec.build(&bare)?], cfg.pool)?;
        let pred = m.model.predict(&b)?;
        let out = std::slice::from_raw_parts_mut(values, need);
        out.copy_from_slice(&pred.data()[..need]);
        Ok(())
    })
}
