/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#ifndef LATENT_RESTORE_H
#define LATENT_RESTORE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum {
  LSR_STATUS_OK = 0,
  LSR_STATUS_NULL_POINTER = 1,
  LSR_STATUS_INVALID_ARGUMENT = 2,
  LSR_STATUS_INVALID_CONFIG = 3,
  LSR_STATUS_MISSING_INPUT = 4,
  LSR_STATUS_MISSING_DEPENDENCY = 5,
  LSR_STATUS_DIMENSION_MISMATCH = 6,
  LSR_STATUS_NON_FINITE = 7,
  LSR_STATUS_OUT_OF_RANGE = 8,
  LSR_STATUS_SINGLE_CLASS = 9,
  LSR_STATUS_NO_POSITIVES = 10,
  LSR_STATUS_FORMAT = 11,
  LSR_STATUS_IO = 12,
  LSR_STATUS_INTERNAL = 99,
} LsrStatus;

/**
 * Trained models and thresholds loaded from a model directory.
 */
typedef struct LsrScorer LsrScorer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *lsr_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lsr_version(void);

/**
 * Load the VQ-VAE, prior and VAE checkpoints (and calibrated thresholds, if
 * present) from `models_dir`. `config_path` may be null for the default
 * configuration; checkpoints must have been trained under the same config.
 *
 * # Safety
 * `models_dir` and a non-null `config_path` must be NUL-terminated strings;
 * `out` must be valid for one pointer write.
 */
LsrStatus lsr_scorer_open(const char *models_dir, const char *config_path, LsrScorer **out);

/**
 * Release a scorer. Null is ignored.
 *
 * # Safety
 * `scorer` must come from [`lsr_scorer_open`] and not be used afterwards.
 */
void lsr_scorer_free(LsrScorer *scorer);

/**
 * Side length of the square images the scorer accepts.
 *
 * # Safety
 * `scorer` must be a live handle; `out` valid for one write.
 */
LsrStatus lsr_scorer_image_side(const LsrScorer *scorer, size_t *out);

/**
 * Sample-wise score and pixel-wise anomaly map of one slice by latent
 * restoration. `slice_position` lies in [-0.5, 0.5]; `seed` fixes the
 * restoration draws. `map_out` may be null, otherwise it receives
 * `height * width` values in row-major order.
 *
 * # Safety
 * `pixels` must hold `height * width` values; `map_out`, if non-null, room
 * for as many; `sample_score_out` valid for one write.
 */
LsrStatus lsr_score_image(const LsrScorer *scorer,
                          const double *pixels,
                          size_t height,
                          size_t width,
                          double slice_position,
                          uint64_t seed,
                          double *sample_score_out,
                          double *map_out);

/**
 * VAE baseline: sample score (the VAE loss) and smoothed residual map.
 *
 * # Safety
 * As for [`lsr_score_image`].
 */
LsrStatus lsr_baseline_score(const LsrScorer *scorer,
                             const double *pixels,
                             size_t height,
                             size_t width,
                             double *sample_score_out,
                             double *map_out);

/**
 * Sum of the NLL entries strictly above `lambda_s`.
 *
 * # Safety
 * `nll` must hold `len` values; `out` valid for one write.
 */
LsrStatus lsr_sample_score(const double *nll, size_t len, double lambda_s, double *out);

/**
 * 3x3 minimum then 7x7 mean filter of a non-negative map.
 *
 * # Safety
 * `map` and `out` must each hold `height * width` values.
 */
LsrStatus lsr_smooth(const double *map, size_t height, size_t width, double *out);

/**
 * Area under the ROC curve; ties count one half. Labels are 0 or non-zero.
 *
 * # Safety
 * `scores` and `labels` must hold `len` values; `out` valid for one write.
 */
LsrStatus lsr_auroc(const double *scores, const uint8_t *labels, size_t len, double *out);

/**
 * Step-wise average precision with tied scores grouped.
 *
 * # Safety
 * As for [`lsr_auroc`].
 */
LsrStatus lsr_average_precision(const double *scores,
                                const uint8_t *labels,
                                size_t len,
                                double *out);

/**
 * Dice overlap of two binary masks of `len` pixels (two empty masks give 1).
 *
 * # Safety
 * `pred` and `truth` must hold `len` bytes; `out` valid for one write.
 */
LsrStatus lsr_dice(const uint8_t *pred, const uint8_t *truth, size_t len, double *out);

/**
 * Best Dice over thresholds taken from the map's values (prediction is
 * `map >= threshold`); ties keep the lowest threshold.
 *
 * # Safety
 * `map` and `truth` must hold `len` values; both outputs valid for one write.
 */
LsrStatus lsr_best_dice(const double *map,
                        const uint8_t *truth,
                        size_t len,
                        double *threshold_out,
                        double *dice_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LATENT_RESTORE_H */
