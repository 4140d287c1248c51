#ifndef TOPOADV_H
#define TOPOADV_H

/* Generated by cbindgen from topoadv-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values match the CLI's exit codes where
 * a counterpart exists.
 */
typedef enum TopoadvStatus {
  /**
   * Success.
   */
  TOPOADV_STATUS_OK = 0,
  /**
   * Null pointer, zero row count, or a path that is not valid UTF-8.
   */
  TOPOADV_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Configuration or shape mismatch (wrong input width).
   */
  TOPOADV_STATUS_CONFIG_ERROR = 2,
  /**
   * I/O failure or malformed checkpoint.
   */
  TOPOADV_STATUS_IO_ERROR = 3,
  /**
   * Non-finite or degenerate numerical input.
   */
  TOPOADV_STATUS_NUMERICAL_ERROR = 4,
} TopoadvStatus;

/**
 * Opaque handle to a loaded model and its checkpoint metadata.
 */
typedef struct TopoadvModel TopoadvModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message from the most recent failing call on this thread, empty if none
 * failed yet. The pointer stays valid until the next failing call on the
 * same thread.
 */
const char *topoadv_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *topoadv_version(void);

/**
 * Loads a model checkpoint and writes the new handle to `out`.
 *
 * # Safety
 * `path` must point to a NUL-terminated string and `out` to writable
 * storage for one pointer. On success the handle must be released with
 * [`topoadv_model_free`] exactly once.
 */
enum TopoadvStatus topoadv_model_load(const char *path, struct TopoadvModel **out);

/**
 * Releases a handle returned by [`topoadv_model_load`]. A null pointer is
 * a no-op.
 *
 * # Safety
 * `model` must be a pointer previously returned by [`topoadv_model_load`]
 * and not freed since, or null.
 */
void topoadv_model_free(struct TopoadvModel *model);

/**
 * Runs the model on `rows` inputs of width `cols` (row-major) and writes
 * `rows * num_classes` logits to `logits_out`.
 *
 * # Safety
 * `model` must be a live handle; `x` must hold `rows * cols` doubles;
 * `logits_out` must have room for `rows * num_classes` doubles.
 */
enum TopoadvStatus topoadv_model_logits(const struct TopoadvModel *model,
                                        const double *x,
                                        size_t rows,
                                        size_t cols,
                                        double *logits_out);

/**
 * Runs the model and writes `rows * feature_dim` penultimate-layer
 * features to `features_out`.
 *
 * # Safety
 * As [`topoadv_model_logits`], with `features_out` sized
 * `rows * feature_dim`.
 */
enum TopoadvStatus topoadv_model_features(const struct TopoadvModel *model,
                                          const double *x,
                                          size_t rows,
                                          size_t cols,
                                          double *features_out);

/**
 * Writes the predicted class of each row to `labels_out` (ties go to the
 * lowest class index).
 *
 * # Safety
 * As [`topoadv_model_logits`], with `labels_out` sized `rows`.
 */
enum TopoadvStatus topoadv_model_predict(const struct TopoadvModel *model,
                                         const double *x,
                                         size_t rows,
                                         size_t cols,
                                         uint32_t *labels_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOPOADV_H */
