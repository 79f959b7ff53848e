#ifndef LORADET_H
#define LORADET_H

/* Generated by cbindgen from the loradet-ffi crate; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum LoradetStatus {
  LORADET_STATUS_OK = 0,
  LORADET_STATUS_NULL_ARGUMENT = 1,
  LORADET_STATUS_INVALID_UTF8 = 2,
  LORADET_STATUS_LOAD_FAILED = 3,
  LORADET_STATUS_BAD_INDEX = 4,
  LORADET_STATUS_BUFFER_TOO_SMALL = 5,
  LORADET_STATUS_BAD_IMAGE_SIZE = 6,
  LORADET_STATUS_PREDICT_FAILED = 7,
} LoradetStatus;

/**
 * Opaque detector handle; create with `loradet_model_load`, destroy with
 * `loradet_model_free`.
 */
typedef struct LoradetModel LoradetModel;

/**
 * Load a checkpoint from a NUL-terminated path into a fresh handle.
 * On success writes the handle through `out` and returns `Ok`.
 *
 * # Safety
 * `path` must point to a valid NUL-terminated string and `out` to a
 * writable pointer slot.
 */
enum LoradetStatus loradet_model_load(const char *path, struct LoradetModel **out);

/**
 * Release a handle returned by `loradet_model_load`. Null is a no-op.
 *
 * # Safety
 * `model` must be a pointer previously returned by `loradet_model_load`
 * that has not been freed already.
 */
void loradet_model_free(struct LoradetModel *model);

/**
 * Number of adapter branches (generator families) in the model; 0 for a
 * null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t loradet_model_num_generators(const struct LoradetModel *model);

/**
 * Expected image side length in pixels.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t loradet_model_image_size(const struct LoradetModel *model);

/**
 * Expected channel count.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
uint32_t loradet_model_channels(const struct LoradetModel *model);

/**
 * Copy the NUL-terminated name of generator `index` into `buf`.
 *
 * # Safety
 * `model` must be a live handle; `buf` must point to `buf_len` writable
 * bytes.
 */
enum LoradetStatus loradet_model_generator_name(const struct LoradetModel *model,
                                                uint32_t index,
                                                char *buf,
                                                uintptr_t buf_len);

/**
 * Score one image. `pixels` holds `channels * size * size` floats in
 * [0,1], channel-major row-major. Writes the fake probability through
 * `fake_prob` and, when `merge_weights` is non-null, the per-branch
 * routing weights (length = number of generators).
 *
 * # Safety
 * All pointers must be valid for their stated lengths for the duration
 * of the call.
 */
enum LoradetStatus loradet_predict(const struct LoradetModel *model,
                                   const float *pixels,
                                   uintptr_t pixel_count,
                                   float *fake_prob,
                                   float *merge_weights);

/**
 * Static description of a status code.
 */
const char *loradet_status_message(enum LoradetStatus status);

#endif /* LORADET_H */
