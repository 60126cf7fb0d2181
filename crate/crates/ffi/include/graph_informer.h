#ifndef GRAPH_INFORMER_H
#define GRAPH_INFORMER_H

#include <stddef.h>
#include <stdint.h>

// Result codes.
typedef enum GiStatus {
  GI_STATUS_OK = 0,
  GI_STATUS_NULL_POINTER = 1,
  GI_STATUS_INVALID_ARGUMENT = 2,
  GI_STATUS_PARSE_ERROR = 3,
  GI_STATUS_IO_ERROR = 4,
  GI_STATUS_SHAPE_ERROR = 5,
  GI_STATUS_NUMERIC_ERROR = 6,
  GI_STATUS_BUFFER_TOO_SMALL = 7,
  GI_STATUS_PANIC = 8,
} GiStatus;

// An undirected simple graph.
typedef struct GiGraph GiGraph;

// A Graph Informer model loaded from a checkpoint.
typedef struct GiModel GiModel;

// Summary of one isomorphism-separation run.
typedef struct GiSeparation {
  size_t graphs;
  size_t pairs;
  size_t wl_pairs_separated;
  size_t gi_pairs_separated;
  // Graphs told apart from every other graph of the set.
  size_t gi_graphs_separated;
  double min_distance;
} GiSeparation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, a static NUL-terminated string.
const char *gi_version(void);

// Copy of the calling thread's last error message, or null when the last
// call succeeded. Free with [`gi_string_free`].
char *gi_last_error_message(void);

// # Safety
// `s` is null or a string returned by this library, not yet freed.
void gi_string_free(char *s);

// Parses one graph6 line.
//
// # Safety
// `line` is a NUL-terminated string; `out` is writable.
enum GiStatus gi_graph_from_graph6(const char *line, struct GiGraph **out);

// Builds a graph from `n_edges` pairs stored flat in `edges`
// (`2 * n_edges` entries).
//
// # Safety
// `edges` points to `2 * n_edges` readable values (may be null when
// `n_edges` is 0); `out` is writable.
enum GiStatus gi_graph_from_edges(size_t n,
                                  const size_t *edges,
                                  size_t n_edges,
                                  struct GiGraph **out);

// # Safety
// `graph` is null or a live handle from this library.
void gi_graph_free(struct GiGraph *graph);

// Node count, 0 for a null handle.
//
// # Safety
// `graph` is null or a live handle.
size_t gi_graph_node_count(const struct GiGraph *graph);

// Edge count, 0 for a null handle.
//
// # Safety
// `graph` is null or a live handle.
size_t gi_graph_edge_count(const struct GiGraph *graph);

// Encodes as graph6; free the string with [`gi_string_free`].
//
// # Safety
// `graph` is a live handle; `out` is writable.
enum GiStatus gi_graph_to_graph6(const struct GiGraph *graph, char **out);

// Writes 1 to `separated` when 1-WL refinement tells the graphs apart,
// else 0.
//
// # Safety
// `a` and `b` are live handles; `separated` is writable.
enum GiStatus gi_wl_distinguish(const struct GiGraph *a, const struct GiGraph *b, int *separated);

// Compares untrained-network embeddings of `n_graphs` graphs with the
// default isomorphism-test configuration. `sigmoid` selects the injective
// score map; `threshold <= 0` keeps the default 1e-4.
//
// # Safety
// `graphs` points to `n_graphs` live handles; `out` is writable.
enum GiStatus gi_iso_separate(const struct GiGraph *const *graphs,
                              size_t n_graphs,
                              uint64_t seed,
                              double threshold,
                              int sigmoid,
                              struct GiSeparation *out);

// Loads a checkpoint file.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum GiStatus gi_model_load(const char *path, struct GiModel **out);

// Loads a checkpoint from its JSON text.
//
// # Safety
// `json` is a NUL-terminated string; `out` is writable.
enum GiStatus gi_model_from_json(const char *json, struct GiModel **out);

// # Safety
// `model` is null or a live handle from this library.
void gi_model_free(struct GiModel *model);

// Number of values [`gi_model_predict`] writes for `graph`: `n * n_tasks`
// for node heads, `n_tasks` for graph heads.
//
// # Safety
// `model` and `graph` are live handles; `len` is writable.
enum GiStatus gi_model_output_len(const struct GiModel *model,
                                  const struct GiGraph *graph,
                                  size_t *len);

// Runs the model on one graph. Node heads write row-major `n × n_tasks`,
// graph heads `n_tasks` logits. `written` receives the required length
// even when `capacity` is too small.
//
// # Safety
// `model` and `graph` are live handles; `values` has room for `capacity`
// doubles; `written` is writable.
enum GiStatus gi_model_predict(const struct GiModel *model,
                               const struct GiGraph *graph,
                               double *values,
                               size_t capacity,
                               size_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRAPH_INFORMER_H */
