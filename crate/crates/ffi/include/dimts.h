#ifndef DIMTS_H
#define DIMTS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DimtsDistance {
  DIMTS_DISTANCE_JS = 0,
  DIMTS_DISTANCE_KL = 1,
} DimtsDistance;

typedef enum DimtsStatus {
  DIMTS_STATUS_OK = 0,
  /**
   * bad configuration or argument value
   */
  DIMTS_STATUS_INVALID_ARGUMENT = 1,
  /**
   * unreadable, malformed or mismatched data
   */
  DIMTS_STATUS_DATA = 2,
  /**
   * non-finite values or a failed numerical routine
   */
  DIMTS_STATUS_NUMERIC = 3,
  DIMTS_STATUS_NULL_POINTER = 4,
  DIMTS_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * an internal panic was caught at the boundary
   */
  DIMTS_STATUS_PANIC = 6,
} DimtsStatus;

/**
 * Opaque trained model.
 */
typedef struct DimtsModel DimtsModel;

/**
 * Headline scores of an evaluation. `fdds` is only meaningful when
 * `has_fdds` is true (two or more channels).
 */
typedef struct DimtsMetrics {
  double correlational;
  double mdd;
  double acd;
  double skewness_diff;
  double kurtosis_diff;
  double vds;
  double fdds;
  bool has_fdds;
} DimtsMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the last failure on this thread; empty after a
 * success. The pointer stays valid until the next call into the library
 * on the same thread.
 */
const char *dimts_last_error(void);

/**
 * Loads a checkpoint written by `dimts train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DimtsStatus dimts_model_load(const char *path, struct DimtsModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`dimts_model_load`] and not be used afterwards.
 */
void dimts_model_free(struct DimtsModel *model);

/**
 * Window length and channel count of a model.
 *
 * # Safety
 * All pointers must be valid.
 */
enum DimtsStatus dimts_model_dims(const struct DimtsModel *model,
                                  size_t *seq_len,
                                  size_t *channels);

/**
 * Draws `n` windows into `out` (`n * seq_len * channels` values). With
 * `denormalize` the stored scaling maps values back to data units,
 * otherwise they stay in [-1, 1].
 *
 * # Safety
 * `model` must be valid and `out` must hold `out_len` doubles.
 */
enum DimtsStatus dimts_model_sample(const struct DimtsModel *model,
                                    size_t n,
                                    uint64_t seed,
                                    bool denormalize,
                                    double *out,
                                    size_t out_len);

/**
 * Spectral channel order of a symmetric `c x c` similarity matrix;
 * `order[k]` is the channel scanned at position `k`.
 *
 * # Safety
 * `similarity` must hold `c * c` doubles and `order` `c` entries.
 */
enum DimtsStatus dimts_solve_ordering(const double *similarity, size_t c, size_t *order);

/**
 * Compares `real_n` real and `synth_n` synthetic windows of shape
 * `[len][channels]`. `max_lag = 0` selects the default of `len / 4`.
 *
 * # Safety
 * Buffers must hold the stated number of windows; `out` must be valid.
 */
enum DimtsStatus dimts_evaluate(const double *real,
                                size_t real_n,
                                const double *synthetic,
                                size_t synth_n,
                                size_t len,
                                size_t channels,
                                size_t bins,
                                size_t max_lag,
                                enum DimtsDistance distance,
                                struct DimtsMetrics *out);

/**
 * Selective scan with frozen parameters: `a` is `[h][n]` (negative),
 * `delta` `[k][h]` (positive), `b` and `c` `[k][n]`, `x` and `y` `[k][h]`.
 *
 * # Safety
 * Every buffer must hold the number of doubles implied by its shape.
 */
enum DimtsStatus dimts_selective_scan(const double *a,
                                      const double *delta,
                                      const double *b,
                                      const double *c,
                                      const double *x,
                                      size_t k,
                                      size_t h,
                                      size_t n,
                                      double *y);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIMTS_H */
