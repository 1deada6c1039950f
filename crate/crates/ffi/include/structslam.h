#ifndef STRUCTSLAM_H
#define STRUCTSLAM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result code of every fallible call.
 */
typedef enum SsStatus {
  SS_STATUS_OK = 0,
  SS_STATUS_NULL_POINTER = 1,
  SS_STATUS_INVALID_UTF8 = 2,
  SS_STATUS_CONFIG_ERROR = 3,
  SS_STATUS_SOLVER_ERROR = 4,
  SS_STATUS_INDEX_OUT_OF_RANGE = 5,
  SS_STATUS_NOT_RUN = 6,
  SS_STATUS_PANIC = 7,
} SsStatus;

/*
 Landmark configuration of one run.
 */
typedef enum SsMode {
  SS_MODE_POINTS = 0,
  SS_MODE_POINTS_LINES = 1,
  SS_MODE_POINTS_LINES_PLANES = 2,
} SsMode;

/*
 Opaque experiment handle.
 */
typedef struct SsExperiment SsExperiment;

/*
 Flat copy of one experiment row.
 */
typedef struct SsRunMetrics {
  uint64_t seed;
  enum SsMode mode;
  double ate_rmse_m;
  double mean_ape_m;
  double initial_ate_m;
  double mean_reprojection_px;
  uint64_t rejected_outliers;
  uint64_t injected_outliers;
  uint64_t caught_outliers;
  uint64_t planes;
  uint64_t iterations;
  bool loop_closed;
  /*
   Negative when the relocalization trial was disabled.
   */
  double reloc_mean_ape_m;
} SsRunMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *ss_version(void);

/*
 Message of the last failed call on this thread, or NULL.

 The pointer stays valid until the next call into this library on the same
 thread.
 */
const char *ss_last_error_message(void);

/*
 Parses and validates a JSON experiment configuration.

 # Safety
 `config_json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SsStatus ss_experiment_new(const char *config_json, struct SsExperiment **out);

/*
 Releases a handle. NULL is accepted.

 # Safety
 `exp` must come from [`ss_experiment_new`] and not have been freed.
 */
void ss_experiment_free(struct SsExperiment *exp);

/*
 Runs every `(seed, mode)` cell. `threads == 0` uses all cores.

 # Safety
 `exp` must be a live handle not used concurrently from another thread.
 */
enum SsStatus ss_experiment_run(struct SsExperiment *exp, uint32_t threads, bool deterministic);

/*
 Configuration hash recorded in every row, as a NUL-terminated hex string
 owned by the handle.

 # Safety
 `exp` must be a live handle.
 */
const char *ss_experiment_config_hash(const struct SsExperiment *exp);

/*
 Number of rows produced by the last run.

 # Safety
 `exp` must be a live handle and `out` writable.
 */
enum SsStatus ss_experiment_run_count(const struct SsExperiment *exp, size_t *out);

/*
 Copies row `index` (rows are sorted by seed, then mode).

 # Safety
 `exp` must be a live handle and `out` writable.
 */
enum SsStatus ss_experiment_get_run(const struct SsExperiment *exp,
                                    size_t index,
                                    struct SsRunMetrics *out);

/*
 All rows of the last run as a JSON array. Free with [`ss_string_free`].

 # Safety
 `exp` must be a live handle and `out` writable.
 */
enum SsStatus ss_experiment_results_json(const struct SsExperiment *exp, char **out);

/*
 Releases a string returned by this library. NULL is accepted.

 # Safety
 `s` must come from this library and not have been freed.
 */
void ss_string_free(char *s);

/*
 ATE RMSE of `n` estimated positions against ground truth, both packed as
 `x, y, z` triples, after similarity (`with_scale`) or rigid alignment.
 Fewer than three positions, or collinear ones, give `SolverError`.

 # Safety
 `est` and `gt` must each point to `3 * n` readable doubles and `out` must
 be writable.
 */
enum SsStatus ss_compute_ate(const double *est,
                             const double *gt,
                             size_t n,
                             bool with_scale,
                             double *out);

/*
 Runs the analytic-versus-numeric Jacobian comparison and writes the
 largest relative error.

 # Safety
 `out_max_rel_error` must be writable.
 */
enum SsStatus ss_jacobian_check(uint32_t trials, uint64_t seed, double *out_max_rel_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STRUCTSLAM_H */
