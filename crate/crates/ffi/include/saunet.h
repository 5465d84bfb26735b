#ifndef SAUNET_H
#define SAUNET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  SAUNET_STATUS_OK = 0,
  SAUNET_STATUS_NULL_ARGUMENT = 1,
  SAUNET_STATUS_INVALID_ARGUMENT = 2,
  SAUNET_STATUS_IO = 3,
  SAUNET_STATUS_FORMAT = 4,
  SAUNET_STATUS_SHAPE = 5,
  SAUNET_STATUS_CHECKPOINT = 6,
  SAUNET_STATUS_UNDEFINED = 7,
  SAUNET_STATUS_INTERNAL = 99,
} SaunetStatus;

/**
 * A trained network plus the pipeline it was trained with.
 */
typedef struct SaunetModel SaunetModel;

/**
 * An intensity volume read from disk.
 */
typedef struct SaunetVolume SaunetVolume;

/**
 * Scores of one prediction against one truth mask. `avd` is NaN when the
 * truth is empty.
 */
typedef struct {
  double dice;
  double avd;
  double f1;
  size_t n_truth;
  size_t n_detected;
  size_t n_false;
} SaunetMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, statically allocated.
 */
const char *saunet_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *saunet_last_error(void);

/**
 * Loads a checkpoint file into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
SaunetStatus saunet_model_load(const char *path, SaunetModel **out);

/**
 * # Safety
 * `model` must come from [`saunet_model_load`] and not be used afterwards.
 */
void saunet_model_free(SaunetModel *model);

/**
 * Canonical grid `[h, w, d]` the model segments on.
 *
 * # Safety
 * `model` must be a live handle and `out` point to 3 writable `size_t`.
 */
SaunetStatus saunet_model_grid(const SaunetModel *model, size_t *out);

/**
 * Segments a C-order `h × w × d` float image. `mask_out` receives
 * `h·w·d` labels (0 or 1) at the original shape.
 *
 * # Safety
 * `image` must hold `h·w·d` floats, `shape` and `spacing` 3 values each,
 * `mask_out` room for `h·w·d` bytes.
 */
SaunetStatus saunet_predict(const SaunetModel *model,
                            const float *image,
                            const size_t *shape,
                            const float *spacing,
                            uint8_t *mask_out);

/**
 * Reads a raw or NIfTI intensity volume into `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
SaunetStatus saunet_volume_load(const char *path, SaunetVolume **out);

/**
 * # Safety
 * `volume` must come from [`saunet_volume_load`] and not be used afterwards.
 */
void saunet_volume_free(SaunetVolume *volume);

/**
 * Writes `[h, w, d]` to `shape_out` and `[sh, sw, sd]` to `spacing_out`.
 *
 * # Safety
 * `volume` must be live; both outputs must point to 3 writable values.
 */
SaunetStatus saunet_volume_shape(const SaunetVolume *volume, size_t *shape_out, float *spacing_out);

/**
 * Borrowed C-order voxel data, valid while the handle lives. Null for a
 * null handle.
 *
 * # Safety
 * `volume` must be null or a live handle.
 */
const float *saunet_volume_data(const SaunetVolume *volume);

/**
 * DICE, AVD and lesion F1 of `pred` against `truth` (both C-order
 * `h × w × d`). Truth label 2 is ignored. `connectivity` is 6, 18 or 26.
 *
 * # Safety
 * `pred` and `truth` must hold `h·w·d` bytes, `shape` 3 values, `out` one
 * writable [`SaunetMetrics`].
 */
SaunetStatus saunet_evaluate(const uint8_t *pred,
                             const uint8_t *truth,
                             const size_t *shape,
                             uint8_t connectivity,
                             SaunetMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SAUNET_H */
