#ifndef HEIGHTFORMER_H
#define HEIGHTFORMER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every exported function.
 */
typedef enum HfStatus {
  HF_STATUS_OK = 0,
  HF_STATUS_NULL_POINTER = 1,
  HF_STATUS_INVALID_ARGUMENT = 2,
  HF_STATUS_IO = 3,
  HF_STATUS_DATA = 4,
  HF_STATUS_NUMERIC = 5,
  HF_STATUS_CHECKPOINT = 6,
  HF_STATUS_PANIC = 7,
} HfStatus;

/**
 * Opaque model handle.
 */
typedef struct HfModel HfModel;

/**
 * Pooled metric values. `rmse_log_literal` is the RMSE in meters.
 */
typedef struct HfMetrics {
  double rel;
  double rmse_log;
  double rmse_log_literal;
  double delta1;
  double delta2;
  double delta3;
  uint64_t valid_pixels;
  uint64_t excluded_pixels;
} HfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call into this library on the same
 * thread.
 */
const char *hf_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hf_version(void);

/**
 * Load a model checkpoint from `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HfStatus hf_model_load(const char *path, struct HfModel **out);

/**
 * Build a freshly initialised model from `key = value` config text (may be
 * null for all defaults).
 *
 * # Safety
 * `config_text` must be null or NUL-terminated; `out` must be valid.
 */
enum HfStatus hf_model_new(const char *config_text, uint64_t seed, struct HfModel **out);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void hf_model_free(struct HfModel *model);

/**
 * Exact trainable-parameter count.
 *
 * # Safety
 * Pointers must be valid.
 */
enum HfStatus hf_model_parameter_count(const struct HfModel *model, uint64_t *out);

/**
 * Height range in meters the model regresses into.
 *
 * # Safety
 * Pointers must be valid.
 */
enum HfStatus hf_model_height_range(const struct HfModel *model, double *h_min, double *h_max);

/**
 * Predict a `rows × cols` height map in meters from interleaved RGB values
 * scaled to `[0, 1]`, tiling with `tile`-sized windows overlapping by
 * `overlap` pixels. `heights` receives `rows * cols` values.
 *
 * # Safety
 * `rgb` must hold `rows * cols * 3` floats and `heights` `rows * cols`.
 */
enum HfStatus hf_model_predict(const struct HfModel *model,
                               const float *rgb,
                               size_t rows,
                               size_t cols,
                               size_t tile,
                               size_t overlap,
                               float *heights);

/**
 * Map heights in meters to `[0, 1]` over `[h_min, h_max]`. NaN inputs stay NaN.
 *
 * # Safety
 * `dsm` and `out` must each hold `len` floats.
 */
enum HfStatus hf_normalize_heights(const float *dsm,
                                   size_t len,
                                   double h_min,
                                   double h_max,
                                   float *out);

/**
 * Pooled metrics over `len` pixels. Heights are shifted so `h_min` lands at
 * `offset_m` before ratios and logs are taken. `mask` may be null.
 *
 * # Safety
 * `pred` and `gt` must hold `len` floats, `mask` null or `len` bytes.
 */
enum HfStatus hf_metrics_evaluate(const float *pred,
                                  const float *gt,
                                  const uint8_t *mask,
                                  size_t len,
                                  double h_min,
                                  double offset_m,
                                  struct HfMetrics *out);

/**
 * Scale-invariant log loss over valid pixels of strictly positive heights.
 *
 * # Safety
 * `pred` and `gt` must hold `len` doubles, `mask` null or `len` bytes.
 */
enum HfStatus hf_silog_loss(const double *pred,
                            const double *gt,
                            const uint8_t *mask,
                            size_t len,
                            double alpha,
                            double lambda,
                            double *out);

/**
 * Multiply-accumulate counts of global and `m × m` windowed self-attention
 * over an `h × w × c` map.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum HfStatus hf_attention_cost(uint64_t h,
                                uint64_t w,
                                uint64_t c,
                                uint64_t m,
                                uint64_t *global,
                                uint64_t *windowed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEIGHTFORMER_H */
