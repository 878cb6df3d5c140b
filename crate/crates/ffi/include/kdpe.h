#ifndef KDPE_H
#define KDPE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum KdpeDgp {
  KDPE_DGP_DGP1 = 1,
  KDPE_DGP_DGP2 = 2,
} KdpeDgp;

typedef enum KdpePreMethod {
  KDPE_PRE_METHOD_NADARAYA_WATSON = 0,
  KDPE_PRE_METHOD_LOGISTIC_LINEAR = 1,
  KDPE_PRE_METHOD_ORACLE = 2,
} KdpePreMethod;

typedef enum KdpeStatus {
  KDPE_STATUS_OK = 0,
  KDPE_STATUS_NULL_POINTER = 1,
  KDPE_STATUS_INVALID_ARGUMENT = 2,
  KDPE_STATUS_INVALID_INPUT = 3,
  KDPE_STATUS_SOLVER_FAILURE = 4,
  KDPE_STATUS_IO = 5,
  KDPE_STATUS_INTERNAL = 6,
  KDPE_STATUS_PANIC = 7,
} KdpeStatus;

typedef enum KdpeTarget {
  KDPE_TARGET_ATE = 0,
  KDPE_TARGET_RR = 1,
  KDPE_TARGET_OR = 2,
} KdpeTarget;

/**
 * Opaque dataset.
 */
typedef struct KdpeDataset KdpeDataset;

/**
 * Opaque finite-support model.
 */
typedef struct KdpeModel KdpeModel;

/**
 * Tuning for [`kdpe_fit_model`]; start from [`kdpe_options_default`].
 */
typedef struct KdpeOptions {
  double lambda;
  double gamma;
  double c_bound;
  size_t max_outer_iterations;
  double solver_tol;
} KdpeOptions;

/**
 * Summary of a KDPE run.
 */
typedef struct KdpeFitInfo {
  size_t iterations;
  bool converged;
  double seconds;
} KdpeFitInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *kdpe_last_error(void);

const char *kdpe_version(void);

/**
 * Default options for `dgp`.
 */
struct KdpeOptions kdpe_options_default(enum KdpeDgp dgp);

/**
 * Draws `n` observations from `dgp` with `seed`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum KdpeStatus kdpe_dataset_simulate(enum KdpeDgp dgp,
                                      size_t n,
                                      uint64_t seed,
                                      struct KdpeDataset **out);

/**
 * Builds a point-treatment dataset from column arrays of length `n`.
 *
 * # Safety
 * Each array must hold `n` readable elements; `out` must be writable.
 */
enum KdpeStatus kdpe_dataset_from_dgp1(const double *x,
                                       const uint8_t *a,
                                       const uint8_t *y,
                                       size_t n,
                                       struct KdpeDataset **out);

/**
 * Builds a longitudinal dataset from column arrays of length `n`.
 *
 * # Safety
 * Each array must hold `n` readable elements; `out` must be writable.
 */
enum KdpeStatus kdpe_dataset_from_dgp2(const double *x,
                                       const uint8_t *a0,
                                       const uint8_t *l1,
                                       const uint8_t *a1,
                                       const uint8_t *y,
                                       size_t n,
                                       struct KdpeDataset **out);

/**
 * Number of observations, or 0 for null.
 *
 * # Safety
 * `ds` must be null or a live dataset.
 */
size_t kdpe_dataset_len(const struct KdpeDataset *ds);

/**
 * # Safety
 * `ds` must be null or a dataset not yet freed.
 */
void kdpe_dataset_free(struct KdpeDataset *ds);

/**
 * Fits the initial model, clipping every table to `[clip, 1 - clip]`.
 *
 * # Safety
 * `ds` must be a live dataset and `out` writable.
 */
enum KdpeStatus kdpe_pre_estimate(const struct KdpeDataset *ds,
                                  enum KdpePreMethod method,
                                  double clip,
                                  struct KdpeModel **out);

/**
 * Runs KDPE from `pre` on `ds` with the default kernel for the dataset.
 * `info` may be null.
 *
 * # Safety
 * `ds` and `pre` must be live handles, `opts` readable and `out` writable.
 */
enum KdpeStatus kdpe_fit_model(const struct KdpeDataset *ds,
                               const struct KdpeModel *pre,
                               const struct KdpeOptions *opts,
                               struct KdpeModel **out,
                               struct KdpeFitInfo *info);

/**
 * Plug-in value of `t` under `model`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum KdpeStatus kdpe_model_evaluate(const struct KdpeModel *model, enum KdpeTarget t, double *out);

/**
 * Versioned JSON document for `model`; release with [`kdpe_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum KdpeStatus kdpe_model_to_json(const struct KdpeModel *model, char **out);

/**
 * Parses a model document produced by [`kdpe_model_to_json`].
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` writable.
 */
enum KdpeStatus kdpe_model_from_json(const char *json, struct KdpeModel **out);

/**
 * # Safety
 * `model` must be null or a model not yet freed.
 */
void kdpe_model_free(struct KdpeModel *model);

/**
 * # Safety
 * `s` must be null or a string returned by this library and not yet freed.
 */
void kdpe_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KDPE_H */
