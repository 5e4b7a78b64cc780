#ifndef LISO_FFI_H
#define LISO_FFI_H

/* Generated by cbindgen from liso-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call.
 */
typedef enum LisoStatus {
  LISO_STATUS_OK = 0,
  LISO_STATUS_IO = 1,
  LISO_STATUS_CONFIG = 2,
  LISO_STATUS_DIVERGENCE = 3,
  LISO_STATUS_CAPACITY_EXCEEDED = 4,
  LISO_STATUS_PAYLOAD_MISMATCH = 5,
  LISO_STATUS_MALFORMED_HEADER = 6,
  LISO_STATUS_NULL_ARGUMENT = 7,
  LISO_STATUS_INTERNAL = 8,
} LisoStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct LisoModel LisoModel;

/**
 * Options of [`liso_encode_file`]. Obtain defaults from
 * [`liso_encode_options_default`] and adjust fields as needed.
 */
typedef struct LisoEncodeOptions {
  /**
   * Step size of the learned update.
   */
  float eta;
  /**
   * Iteration budget.
   */
  uint32_t max_iters;
  /**
   * Iterations without improvement before stopping.
   */
  uint32_t patience;
  /**
   * Quality weight of the objective.
   */
  float lambda;
  /**
   * Truncation bound on the perturbation; 0 or below disables it.
   */
  float tau;
  /**
   * L-BFGS polish steps after the learned encoder; 0 disables refinement.
   */
  uint32_t refine_lbfgs_steps;
  /**
   * JPEG quality in [1,100]; 0 keeps the JPEG layer off (PNG output).
   */
  uint8_t jpeg_quality;
} LisoEncodeOptions;

/**
 * Per-call statistics of [`liso_encode_file`].
 */
typedef struct LisoEncodeStats {
  /**
   * Bit error rate measured on the stored file.
   */
  double error_rate;
  /**
   * PSNR (dB) between quantized cover and stored stego image.
   */
  double psnr;
  /**
   * SSIM between quantized cover and stored stego image.
   */
  double ssim;
  /**
   * Optimizer iterations performed.
   */
  uint64_t iterations;
  /**
   * Wall-clock encode seconds.
   */
  double seconds;
} LisoEncodeStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent error on this thread. The pointer stays valid
 * until the next failing call on the same thread; do not free it.
 */
const char *liso_last_error_message(void);

/**
 * Library version as a static string; do not free it.
 */
const char *liso_version(void);

/**
 * Loads a checkpoint into a model handle. On success writes the handle to
 * `out_model`; free it with [`liso_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` a valid pointer.
 */
enum LisoStatus liso_model_load(const char *path, struct LisoModel **out_model);

/**
 * Frees a model handle. A null pointer is a no-op.
 *
 * # Safety
 * `model` must have come from [`liso_model_load`] and not be freed twice.
 */
void liso_model_free(struct LisoModel *model);

/**
 * Payload capacity of the model in bits per pixel.
 *
 * # Safety
 * `model` must be a live handle from [`liso_model_load`].
 */
uint32_t liso_model_bpp(const struct LisoModel *model);

/**
 * Default encode options matching the CLI defaults.
 */
struct LisoEncodeOptions liso_encode_options_default(void);

/**
 * Embeds `message_len` bytes into the cover image file and writes the stego
 * image to `out_path` (PNG, or JPEG when `jpeg_quality` is nonzero). Fills
 * `out_stats` when non-null.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `message` must point to
 * `message_len` readable bytes; `options` and `out_stats` may be null.
 */
enum LisoStatus liso_encode_file(const struct LisoModel *model,
                                 const char *cover_path,
                                 const uint8_t *message,
                                 size_t message_len,
                                 const char *out_path,
                                 const struct LisoEncodeOptions *options,
                                 struct LisoEncodeStats *out_stats);

/**
 * Decodes the message bytes hidden in a stego image file. On success the
 * buffer is written to `out_bytes`/`out_len`; release it with
 * [`liso_bytes_free`].
 *
 * # Safety
 * `stego_path` must be a NUL-terminated string; `out_bytes` and `out_len`
 * must be valid pointers.
 */
enum LisoStatus liso_decode_file(const struct LisoModel *model,
                                 const char *stego_path,
                                 uint8_t **out_bytes,
                                 size_t *out_len);

/**
 * Frees a buffer returned by [`liso_decode_file`].
 *
 * # Safety
 * `bytes`/`len` must be exactly the pair produced by a decode call; null is
 * a no-op.
 */
void liso_bytes_free(uint8_t *bytes, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LISO_FFI_H */
