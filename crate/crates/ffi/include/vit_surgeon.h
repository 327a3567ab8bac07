#ifndef VIT_SURGEON_H
#define VIT_SURGEON_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum VsStatus {
  VS_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8, undersized buffer or bad option.
   */
  VS_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Malformed or inconsistent files and pixel data.
   */
  VS_STATUS_DATA = 2,
  /**
   * Invalid model, configuration or surgery that cannot be resolved.
   */
  VS_STATUS_MODEL = 3,
  /**
   * Internal panic caught at the boundary.
   */
  VS_STATUS_PANIC = 4,
} VsStatus;

typedef enum VsMode {
  VS_MODE_VANILLA = 0,
  VS_MODE_CLEARCLIP = 1,
  VS_MODE_GCLIP = 2,
} VsMode;

typedef enum VsFusionVariant {
  VS_FUSION_VARIANT_GLOBAL_BLOCKS = 0,
  VS_FUSION_VARIANT_CLS_DUPLICATE = 1,
} VsFusionVariant;

/**
 * Opaque model handle.
 */
typedef struct VsModel VsModel;

/**
 * Opaque class text-embedding bank.
 */
typedef struct VsTextBank VsTextBank;

typedef struct VsModelInfo {
  size_t layers;
  size_t width;
  size_t heads;
  size_t patch;
  size_t image_size;
  size_t embed_dim;
} VsModelInfo;

/**
 * Segmentation settings. Start from [`vs_segment_options_default`].
 */
typedef struct VsSegmentOptions {
  enum VsMode mode;
  /**
   * Extra fused blocks after the emergence block; negative fuses none.
   */
  int32_t amf_width;
  enum VsFusionVariant amf_variant;
  bool cs_enabled;
  /**
   * Suppression start block; negative picks it from the entropy profile.
   */
  int32_t cs_start;
  bool cs_dual;
  /**
   * Zero keeps the model's default for each of these.
   */
  size_t resize_short_side;
  size_t window;
  size_t stride;
} VsSegmentOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *vs_last_error_message(void);

/**
 * Loads `model.gtf` and `model.cfg` from a directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum VsStatus vs_model_load(const char *dir, struct VsModel **out);

/**
 * Builds a seeded random model of the given geometry.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VsStatus vs_model_synthetic(struct VsModelInfo info, uint64_t seed, struct VsModel **out);

/**
 * Writes `model.gtf` and `model.cfg` into `dir`, creating it if needed.
 *
 * # Safety
 * `model` must come from this library and `dir` be NUL-terminated.
 */
enum VsStatus vs_model_save(const struct VsModel *model, const char *dir);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void vs_model_free(struct VsModel *model);

/**
 * # Safety
 * `model` must come from this library and `out` be a valid pointer.
 */
enum VsStatus vs_model_info(const struct VsModel *model, struct VsModelInfo *out);

/**
 * Normalized fc2 norm entropy of each block into `out[0..layers]`.
 *
 * # Safety
 * `out` must point to `len` writable doubles.
 */
enum VsStatus vs_model_entropy_profile(const struct VsModel *model, double *out, size_t len);

/**
 * Resolves the suppression start block; negative `start` means automatic.
 *
 * # Safety
 * `model` must come from this library and `out` be a valid pointer.
 */
enum VsStatus vs_model_suppression_start(const struct VsModel *model, int32_t start, size_t *out);

/**
 * New model with fc2 of blocks `s..=f` channel-suppressed; negative
 * `start` resolves `s` automatically.
 *
 * # Safety
 * `model` must come from this library and `out` be a valid pointer.
 */
enum VsStatus vs_model_suppress(const struct VsModel *model, int32_t start, struct VsModel **out);

/**
 * Loads the `text_embeddings` tensor of a GTF file with its class names.
 *
 * # Safety
 * Both paths must be NUL-terminated and `out` a valid pointer.
 */
enum VsStatus vs_text_bank_load(const char *gtf, const char *classes, struct VsTextBank **out);

/**
 * Builds a bank from `classes × dim` row-major embeddings; class names
 * are `class0`, `class1`, ...
 *
 * # Safety
 * `embeddings` must point to `classes * dim` floats and `out` be valid.
 */
enum VsStatus vs_text_bank_new(const float *embeddings,
                               size_t classes,
                               size_t dim,
                               struct VsTextBank **out);

/**
 * # Safety
 * `bank` must be null or a handle not yet freed.
 */
void vs_text_bank_free(struct VsTextBank *bank);

/**
 * # Safety
 * `bank` must be null or come from this library.
 */
size_t vs_text_bank_num_classes(const struct VsTextBank *bank);

/**
 * gclip with one extra fused block and automatic dual-stream suppression.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum VsStatus vs_segment_options_default(struct VsSegmentOptions *out);

/**
 * Segments an interleaved 8-bit RGB image, writing one class index per
 * pixel into `mask` (`width * height` bytes). Null `options` uses the
 * defaults.
 *
 * # Safety
 * `rgb` must point to `width * height * 3` bytes, `mask` to
 * `width * height` writable bytes, and handles must come from this library.
 */
enum VsStatus vs_segment_rgb(const struct VsModel *model,
                             const struct VsTextBank *bank,
                             const uint8_t *rgb,
                             size_t width,
                             size_t height,
                             const struct VsSegmentOptions *options,
                             uint8_t *mask);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIT_SURGEON_H */
