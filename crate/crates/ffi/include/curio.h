#ifndef CURIO_H
#define CURIO_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values match the `curio` exit codes where
 * both exist.
 */
typedef enum CurioStatus {
  CURIO_STATUS_OK = 0,
  CURIO_STATUS_INVALID_INPUT = 2,
  CURIO_STATUS_IO = 3,
  CURIO_STATUS_NUMERIC = 4,
  CURIO_STATUS_NULL_POINTER = 5,
  CURIO_STATUS_PANIC = 6,
} CurioStatus;

/**
 * A trained encoder with its heads.
 */
typedef struct CurioGenerator CurioGenerator;

/**
 * A world description (task, camera, render settings).
 */
typedef struct CurioWorld CurioWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after success.
 * The pointer stays valid until the next call on this thread.
 */
const char *curio_last_error(void);

/**
 * Create a preset world (`circles`, `spheres` or `varied`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CurioStatus curio_world_preset(const char *name, size_t image_size, struct CurioWorld **out);

/**
 * # Safety
 * `world` must come from this library and not be used afterwards.
 */
void curio_world_free(struct CurioWorld *world);

/**
 * Side length of images in this world, or 0 for a null handle.
 *
 * # Safety
 * `world` must be null or a live handle.
 */
size_t curio_world_image_size(const struct CurioWorld *world);

/**
 * Render a scene JSON into `out`, which must hold `size * size * 3` doubles.
 *
 * # Safety
 * Pointers must be valid; `out` must have room for `out_len` doubles.
 */
enum CurioStatus curio_render_scene(const struct CurioWorld *world,
                                    const char *scene_json,
                                    double *out,
                                    size_t out_len);

/**
 * Load the generator stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CurioStatus curio_generator_load(const char *path, struct CurioGenerator **out);

/**
 * # Safety
 * `g` must come from this library and not be used afterwards.
 */
void curio_generator_free(struct CurioGenerator *g);

/**
 * New handle to the world a generator was trained on.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CurioStatus curio_generator_world(const struct CurioGenerator *g, struct CurioWorld **out);

/**
 * Predict the scene code of one image. The returned JSON string must be
 * released with [`curio_string_free`].
 *
 * # Safety
 * `image` must hold `size * size * 3` doubles for the generator's image size.
 */
enum CurioStatus curio_generator_encode(struct CurioGenerator *g,
                                        const double *image,
                                        char **out_json);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void curio_string_free(char *s);

/**
 * Assignment-based parameter error between two scene codes of `world`,
 * with unit weights.
 *
 * # Safety
 * Pointers must be valid.
 */
enum CurioStatus curio_param_metric(const struct CurioWorld *world,
                                    const char *a_json,
                                    const char *b_json,
                                    double *out);

/**
 * Structural dissimilarity of two `height x width` RGB images.
 *
 * # Safety
 * `a` and `b` must each hold `height * width * 3` doubles.
 */
enum CurioStatus curio_dssim(const double *a,
                             const double *b,
                             size_t height,
                             size_t width,
                             double *out);

/**
 * Run the analytic blob experiment and report the collapsed and solved
 * fractions.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum CurioStatus curio_oracle_run(size_t n_problems,
                                  size_t steps,
                                  bool curiosity,
                                  uint64_t seed,
                                  double *out_collapse,
                                  double *out_success);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CURIO_H */
