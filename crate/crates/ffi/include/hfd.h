/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef HFD_H
#define HFD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HfdStatus {
  HFD_STATUS_OK = 0,
  HFD_STATUS_NULL_POINTER = 1,
  HFD_STATUS_INVALID_ARGUMENT = 2,
  HFD_STATUS_IO = 3,
  HFD_STATUS_PARSE = 4,
  HFD_STATUS_UNSUPPORTED_VERSION = 5,
  HFD_STATUS_DIMENSION_MISMATCH = 6,
  HFD_STATUS_INSUFFICIENT_CANDIDATES = 7,
  HFD_STATUS_UNLABELED = 8,
  HFD_STATUS_TRAINING = 9,
  HFD_STATUS_PANIC = 10,
} HfdStatus;

typedef enum HfdSearchMode {
  HFD_SEARCH_MODE_APPROX = 0,
  HFD_SEARCH_MODE_BRUTE = 1,
} HfdSearchMode;

// Opaque trained forest.
typedef struct HfdForest HfdForest;

// Training options; start from [`hfd_train_params_default`].
typedef struct HfdTrainParams {
  size_t n_trees;
  uint64_t seed;
  size_t min_node_size;
  // Features per node; 0 selects the default.
  size_t d_k;
  double alpha;
  // Non-zero: z-score features before training.
  uint8_t normalize;
  // Constraints sampled per class when labels are given without pairs.
  size_t constraints_per_class;
} HfdTrainParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Defaults: 500 trees, seed 0, `min_node_size` 5, default `d_k`,
// `alpha` 0.5, normalization on, 1000 constraints per class.
struct HfdTrainParams hfd_train_params_default(void);

// Copies the last error message of this thread into `buf` (NUL-terminated,
// truncated to `len`). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t hfd_last_error_message(char *buf, size_t len);

// Trains a forest on `n × d` row-major `points`.
//
// Constraints come from the `n_must_link` / `n_cannot_link` index pairs
// (flattened `i, j, i, j, ...`) when either count is non-zero; otherwise
// they are sampled from `labels` (which may then not be null). With no
// labels and no pairs every split is unsupervised.
//
// # Safety
// All non-null pointers must reference arrays of the stated sizes; `out`
// must be writable.
enum HfdStatus hfd_forest_train(const double *points,
                                size_t n,
                                size_t d,
                                const int64_t *labels,
                                const size_t *must_link,
                                size_t n_must_link,
                                const size_t *cannot_link,
                                size_t n_cannot_link,
                                const struct HfdTrainParams *params,
                                struct HfdForest **out);

// Loads a model file written by `hfd train` or [`hfd_forest_save`].
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum HfdStatus hfd_forest_load(const char *path, struct HfdForest **out);

// Parses a model from `len` bytes of JSON.
//
// # Safety
// `json` must point to `len` readable bytes; `out` must be writable.
enum HfdStatus hfd_forest_load_json(const uint8_t *json, size_t len, struct HfdForest **out);

// # Safety
// `forest` must be a live handle; `path` a NUL-terminated string.
enum HfdStatus hfd_forest_save(const struct HfdForest *forest, const char *path);

// Releases a handle; null is ignored.
//
// # Safety
// `forest` must be null or a handle not yet freed.
void hfd_forest_free(struct HfdForest *forest);

// Training points; 0 for a null handle.
//
// # Safety
// `forest` must be null or a live handle.
size_t hfd_forest_n(const struct HfdForest *forest);

// # Safety
// `forest` must be null or a live handle.
size_t hfd_forest_dim(const struct HfdForest *forest);

// # Safety
// `forest` must be null or a live handle.
size_t hfd_forest_n_trees(const struct HfdForest *forest);

// Forest distance between two raw rows of length `d`.
//
// # Safety
// `a` and `b` must point to `d` doubles; `out` must be writable.
enum HfdStatus hfd_forest_distance(const struct HfdForest *forest,
                                   const double *a,
                                   const double *b,
                                   size_t d,
                                   double *out);

// `k` nearest training points of a raw row, ascending by distance.
// `out_ids` (and `out_distances` unless null) need room for `k` entries;
// `out_len` receives the count written.
//
// # Safety
// Pointers must reference arrays of the stated sizes.
enum HfdStatus hfd_forest_knn(const struct HfdForest *forest,
                              const double *query,
                              size_t d,
                              size_t k,
                              size_t k_o,
                              enum HfdSearchMode mode,
                              size_t *out_ids,
                              double *out_distances,
                              size_t *out_len);

// Like [`hfd_forest_knn`] for training point `id`, which is excluded from
// its own list.
//
// # Safety
// Pointers must reference arrays of the stated sizes.
enum HfdStatus hfd_forest_knn_training(const struct HfdForest *forest,
                                       size_t id,
                                       size_t k,
                                       size_t k_o,
                                       enum HfdSearchMode mode,
                                       size_t *out_ids,
                                       double *out_distances,
                                       size_t *out_len);

// Library version, NUL-terminated, static.
const char *hfd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HFD_H */
