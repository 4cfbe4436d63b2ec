/* Generated by cbindgen. Do not edit. */

#ifndef CAIR_H
#define CAIR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum CairStatus {
  CAIR_STATUS_OK = 0,
  CAIR_STATUS_NULL_POINTER = 1,
  CAIR_STATUS_INVALID_ARGUMENT = 2,
  CAIR_STATUS_IO = 3,
  CAIR_STATUS_CORRUPT_WEIGHTS = 4,
  CAIR_STATUS_SHAPE_MISMATCH = 5,
  CAIR_STATUS_CONFIG = 6,
  CAIR_STATUS_NON_FINITE = 7,
  CAIR_STATUS_PANIC = 8,
} CairStatus;

/**
 * Opaque restorer: architecture plus loaded weights.
 */
typedef struct CairModel CairModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load weights; `config_path` may be null to use `config.txt` next to the
 * weights file. On success `*out` owns a model to release with
 * [`cair_model_free`].
 *
 * # Safety
 * Path arguments are null or NUL-terminated; `out` is writable.
 */
enum CairStatus cair_model_load(const char *weights_path,
                                const char *config_path,
                                struct CairModel **out);

/**
 * Release a model. Null is ignored.
 *
 * # Safety
 * `model` is null or came from [`cair_model_load`] and is not used again.
 */
void cair_model_free(struct CairModel *model);

/**
 * Number of learnable scalars.
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
enum CairStatus cair_model_param_count(const struct CairModel *model, size_t *out);

/**
 * Restore one image. `tta` nonzero averages the eight flips and rotations;
 * `tlsc_window` nonzero switches channel attention to local pooling.
 * `output` receives the clamped result in the input layout and may not
 * alias `input`.
 *
 * # Safety
 * `model` is a live handle; `input` and `output` each address
 * `3 * height * width` floats.
 */
enum CairStatus cair_model_restore(const struct CairModel *model,
                                   const float *input,
                                   size_t height,
                                   size_t width,
                                   int tta,
                                   size_t tlsc_window,
                                   float *output);

/**
 * PSNR in dB of two images with peak 1; identical images give 120.
 *
 * # Safety
 * `a` and `b` address `3 * height * width` floats; `out` is writable.
 */
enum CairStatus cair_psnr(const float *a, const float *b, size_t height, size_t width, double *out);

/**
 * Mean SSIM over channels (11×11 Gaussian window, sigma 1.5).
 *
 * # Safety
 * `a` and `b` address `3 * height * width` floats; `out` is writable.
 */
enum CairStatus cair_ssim(const float *a, const float *b, size_t height, size_t width, double *out);

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *cair_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *cair_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CAIR_H */
