#ifndef NCDL_H
#define NCDL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum NcdlStatus {
  NCDL_STATUS_OK = 0,
  NCDL_STATUS_NULL_POINTER = 1,
  NCDL_STATUS_INVALID_ARGUMENT = 2,
  NCDL_STATUS_IO = 3,
  NCDL_STATUS_FORMAT = 4,
  NCDL_STATUS_SHAPE = 5,
  NCDL_STATUS_NON_FINITE = 6,
  NCDL_STATUS_CONFIG = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  NCDL_STATUS_INTERNAL = 99,
} NcdlStatus;

/**
 * Feature dataset loaded from an RFD1 directory.
 */
typedef struct NcdlDataset NcdlDataset;

/**
 * Trained heads loaded from a checkpoint directory.
 */
typedef struct NcdlModel NcdlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next `ncdl_*` call on the same thread.
 */
const char *ncdl_last_error(void);

/**
 * Static version string.
 */
const char *ncdl_version(void);

/**
 * Loads an RFD1 dataset directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NcdlStatus ncdl_dataset_open(const char *path, struct NcdlDataset **out);

/**
 * # Safety
 * `ds` must come from [`ncdl_dataset_open`] or be null.
 */
void ncdl_dataset_free(struct NcdlDataset *ds);

/**
 * Proposal rows; 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live handle or null.
 */
size_t ncdl_dataset_num_rows(const struct NcdlDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle or null.
 */
size_t ncdl_dataset_feature_dim(const struct NcdlDataset *ds);

/**
 * Copies view-1 features of every row into `out` (`num_rows × feature_dim`).
 *
 * # Safety
 * `out` must hold `out_len` doubles.
 */
enum NcdlStatus ncdl_dataset_features(const struct NcdlDataset *ds, double *out, size_t out_len);

/**
 * Loads a discovery checkpoint directory.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NcdlStatus ncdl_model_load(const char *path, struct NcdlModel **out);

/**
 * # Safety
 * `model` must come from [`ncdl_model_load`] or be null.
 */
void ncdl_model_free(struct NcdlModel *model);

/**
 * Known + novel slots of the primary head; 0 for a null handle.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t ncdl_model_num_classes(const struct NcdlModel *model);

/**
 * # Safety
 * `model` must be a live handle or null.
 */
size_t ncdl_model_feature_dim(const struct NcdlModel *model);

/**
 * Class probabilities for `rows` feature vectors; `out` receives
 * `rows × ncdl_model_num_classes` values.
 *
 * # Safety
 * `features` must hold `rows * dim` doubles and `out` `out_len` doubles.
 */
enum NcdlStatus ncdl_model_predict(const struct NcdlModel *model,
                                   const double *features,
                                   size_t rows,
                                   size_t dim,
                                   double *out,
                                   size_t out_len);

/**
 * Log-normal prior masses for `num_classes` classes summing to `total_mass`.
 *
 * # Safety
 * `out` must hold `num_classes` doubles.
 */
enum NcdlStatus ncdl_lognormal_prior(size_t num_classes,
                                     double total_mass,
                                     double mu,
                                     double sigma,
                                     double *out);

/**
 * Balanced pseudo-labels for a `rows × cols` logit matrix. `prior` holds
 * `cols` masses summing to `rows`; `out` receives `rows × cols` values.
 *
 * # Safety
 * `logits` and `out` must hold `rows * cols` doubles, `prior` `cols`.
 */
enum NcdlStatus ncdl_sinkhorn(const double *logits,
                              size_t rows,
                              size_t cols,
                              const double *prior,
                              double lambda,
                              size_t num_iters,
                              double *out);

/**
 * Minimum-cost assignment on a `rows × cols` matrix. `out_cols[i]` gets the
 * column assigned to row `i`, or -1; `out_total` the summed cost.
 *
 * # Safety
 * `cost` must hold `rows * cols` doubles and `out_cols` `rows` entries.
 */
enum NcdlStatus ncdl_hungarian(const double *cost,
                               size_t rows,
                               size_t cols,
                               int64_t *out_cols,
                               double *out_total);

/**
 * IoU of two `[x1, y1, x2, y2]` boxes; NaN if either pointer is null.
 *
 * # Safety
 * `a` and `b` must each hold 4 doubles or be null.
 */
double ncdl_iou(const double *a, const double *b);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NCDL_H */
