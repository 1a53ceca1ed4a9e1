#ifndef SQBOX_H
#define SQBOX_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SqboxStatus {
  SQBOX_STATUS_OK = 0,
  SQBOX_STATUS_NULL_POINTER = 1,
  SQBOX_STATUS_INVALID_INPUT = 2,
  SQBOX_STATUS_DELTA_INVALID = 3,
  SQBOX_STATUS_DELTA_TOO_SMALL = 4,
  SQBOX_STATUS_EMPTY_SCORES = 5,
  SQBOX_STATUS_ALL_SCALES_ZERO = 6,
  SQBOX_STATUS_BAD_SPLIT = 7,
  SQBOX_STATUS_DIMENSION_MISMATCH = 8,
  SQBOX_STATUS_LENGTH_MISMATCH = 9,
  SQBOX_STATUS_INSUFFICIENT_DATA = 10,
  SQBOX_STATUS_IO = 11,
  SQBOX_STATUS_SCHEMA = 12,
  SQBOX_STATUS_BUFFER_TOO_SMALL = 13,
  SQBOX_STATUS_PANIC = 14,
} SqboxStatus;

typedef enum SqboxStrategy {
  SQBOX_STRATEGY_STRICT = 0,
  SQBOX_STRATEGY_UPPER_CONFIDENCE = 1,
} SqboxStrategy;

typedef enum SqboxMethod {
  SQBOX_METHOD_SQBOX = 0,
  SQBOX_METHOD_CTE = 1,
} SqboxMethod;

/**
 * Fitted prediction box.
 */
typedef struct SqboxBox SqboxBox;

/**
 * Fitted trajectory band model.
 */
typedef struct SqboxModel SqboxModel;

/**
 * A selected order statistic.
 */
typedef struct SqboxQuantile {
  double value;
  /**
   * 1-based rank among the scores.
   */
  size_t rank;
  bool guaranteed;
} SqboxQuantile;

/**
 * Settings for [`sqbox_model_fit`]. Start from [`sqbox_fit_config_default`].
 */
typedef struct SqboxFitConfig {
  enum SqboxMethod method;
  size_t l;
  /**
   * Scale rows; ignored by the total-exceedance method.
   */
  size_t m;
  double delta;
  /**
   * Ignored by the total-exceedance method.
   */
  double delta_prime;
  enum SqboxStrategy strategy;
  double ucb_confidence;
  size_t trees;
  size_t min_leaf;
  uint64_t seed;
} SqboxFitConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static description of a status code.
 */
const char *sqbox_status_message(enum SqboxStatus status);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `capacity`, into `buf`. Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `capacity` writable bytes.
 */
size_t sqbox_last_error(char *buf, size_t capacity);

/**
 * Conformal rank for `n_cal` calibration scores at miscoverage `delta`.
 *
 * # Safety
 * `out_rank` must be null or valid for writes.
 */
enum SqboxStatus sqbox_conformal_index(size_t n_cal, double delta, size_t *out_rank);

/**
 * Conformal threshold of `scores`.
 *
 * # Safety
 * `scores` must point to `n` readable doubles and `result` must be valid
 * for writes.
 */
enum SqboxStatus sqbox_conformal_quantile(const double *scores,
                                          size_t n,
                                          double delta,
                                          enum SqboxStrategy kind,
                                          double ucb_confidence,
                                          struct SqboxQuantile *result);

/**
 * Upper confidence bound on the level-`q` quantile of the score law.
 *
 * # Safety
 * As for [`sqbox_conformal_quantile`].
 */
enum SqboxStatus sqbox_quantile_ucb(const double *scores,
                                    size_t n,
                                    double q,
                                    double confidence,
                                    struct SqboxQuantile *result);

/**
 * `P(Bin(n, p) <= k)`.
 *
 * # Safety
 * `out_p` must be valid for writes.
 */
enum SqboxStatus sqbox_binomial_cdf(uint64_t k, uint64_t n, double p, double *out_p);

/**
 * Scaled prediction box from `n` row-major points of dimension `d`.
 *
 * # Safety
 * `points` must hold `n * d` doubles; `handle` must be valid for writes.
 */
enum SqboxStatus sqbox_box_fit(const double *points,
                               size_t n,
                               size_t d,
                               size_t m,
                               double delta,
                               enum SqboxStrategy kind,
                               double ucb_confidence,
                               struct SqboxBox **handle);

/**
 * Per-coordinate Bonferroni box.
 *
 * # Safety
 * As for [`sqbox_box_fit`].
 */
enum SqboxStatus sqbox_box_fit_bonferroni(const double *points,
                                          size_t n,
                                          size_t d,
                                          size_t m,
                                          double delta,
                                          struct SqboxBox **handle);

/**
 * Dimension of the box, 0 for a null handle.
 *
 * # Safety
 * `b` must be null or a live handle.
 */
size_t sqbox_box_dim(const struct SqboxBox *b);

/**
 * Writes the lower and upper corners into buffers of length `len`.
 *
 * # Safety
 * `b` must be a live handle; `lo` and `hi` must hold `len` doubles.
 */
enum SqboxStatus sqbox_box_bounds(const struct SqboxBox *b, double *lo, double *hi, size_t len);

/**
 * Conformal inflation factor and whether its confidence target was met.
 *
 * # Safety
 * `b` must be a live handle; the out-pointers must be valid for writes.
 */
enum SqboxStatus sqbox_box_beta(const struct SqboxBox *b, double *beta, bool *guaranteed);

/**
 * # Safety
 * `b` must be a live handle; `point` must hold `len` doubles.
 */
enum SqboxStatus sqbox_box_contains(const struct SqboxBox *b,
                                    const double *point,
                                    size_t len,
                                    bool *inside);

/**
 * # Safety
 * `b` must be null or a handle not yet freed.
 */
void sqbox_box_free(struct SqboxBox *b);

/**
 * Defaults for `method`: `m` 100, `delta` 0.1, `delta_prime` 0.2, strict
 * quantile, 1000 trees with leaves of at least 20. The training count `l`
 * is 0 and must be set by the caller.
 */
struct SqboxFitConfig sqbox_fit_config_default(enum SqboxMethod method);

/**
 * Fits a band model on `n` trajectories: `features` is `n x d` and
 * `behaviors` is `n x horizon`, both row-major.
 *
 * # Safety
 * The arrays must have the stated sizes; `config` must be readable and
 * `handle` valid for writes.
 */
enum SqboxStatus sqbox_model_fit(const double *features,
                                 const double *behaviors,
                                 size_t n,
                                 size_t d,
                                 size_t horizon,
                                 const struct SqboxFitConfig *config,
                                 struct SqboxModel **handle);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `handle` valid for writes.
 */
enum SqboxStatus sqbox_model_load(const char *path, struct SqboxModel **handle);

/**
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
enum SqboxStatus sqbox_model_save(const struct SqboxModel *model, const char *path);

/**
 * Horizon of the model, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sqbox_model_horizon(const struct SqboxModel *model);

/**
 * Start-state dimension of the model, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t sqbox_model_feature_dim(const struct SqboxModel *model);

/**
 * Band at start state `s0` into `lo` and `hi` (each `len >= horizon`).
 * `total_exceedance_bound`, when not null, receives the calibrated bound
 * of a total-exceedance model and NaN for a box model.
 *
 * # Safety
 * `model` must be a live handle; `s0` must hold `d` doubles and the
 * buffers `len` doubles.
 */
enum SqboxStatus sqbox_model_predict_band(const struct SqboxModel *model,
                                          const double *s0,
                                          size_t d,
                                          double *lo,
                                          double *hi,
                                          size_t len,
                                          double *total_exceedance_bound);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void sqbox_model_free(struct SqboxModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SQBOX_H */
