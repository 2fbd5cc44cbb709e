#ifndef AIRSTREAMS_H
#define AIRSTREAMS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AsStatus {
  AS_STATUS_OK = 0,
  /**
   * Inconsistent configuration or hyperparameters.
   */
  AS_STATUS_CONFIG = 1,
  /**
   * Malformed caller data: arguments, labels, files.
   */
  AS_STATUS_INPUT = 2,
  /**
   * API used out of order.
   */
  AS_STATUS_USAGE = 3,
  /**
   * NaN or infinity during computation.
   */
  AS_STATUS_NUMERIC = 4,
  /**
   * Dataset or checkpoint on disk is incomplete or inconsistent.
   */
  AS_STATUS_INTEGRITY = 5,
  AS_STATUS_IO = 6,
  /**
   * A required pointer argument was null.
   */
  AS_STATUS_NULL_POINTER = 7,
  /**
   * A string argument was not valid UTF-8.
   */
  AS_STATUS_INVALID_UTF8 = 8,
  /**
   * Internal panic; the library state is unaffected but the call failed.
   */
  AS_STATUS_PANIC = 9,
} AsStatus;

/**
 * Dataset split selector.
 */
typedef enum AsSplit {
  AS_SPLIT_TRAIN = 0,
  AS_SPLIT_VAL = 1,
} AsSplit;

/**
 * Evaluation metric selector.
 */
typedef enum AsMetric {
  AS_METRIC_TOP1 = 0,
  AS_METRIC_MAP = 1,
  AS_METRIC_MEAN_PER_CLASS = 2,
} AsMetric;

/**
 * A dataset loaded into memory.
 */
typedef struct AsDataset AsDataset;

/**
 * A trained model restored from a checkpoint.
 */
typedef struct AsModel AsModel;

/**
 * Dimensions of a dataset's clips.
 */
typedef struct AsDatasetInfo {
  size_t num_train;
  size_t num_val;
  size_t num_actions;
  size_t frames;
  size_t height;
  size_t width;
} AsDatasetInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *as_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *as_version(void);

/**
 * Writes a synthetic dataset to `out_dir`.
 *
 * # Safety
 * `out_dir` must be a valid NUL-terminated string.
 */
enum AsStatus as_dataset_generate(const char *out_dir,
                                  size_t num_train,
                                  size_t num_val,
                                  size_t num_actions,
                                  size_t frames,
                                  size_t size,
                                  uint64_t seed);

/**
 * Loads a dataset directory into a new handle stored in `*out`.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum AsStatus as_dataset_load(const char *dir, struct AsDataset **out);

/**
 * Releases a dataset handle. NULL is ignored.
 *
 * # Safety
 * `ds` must come from [`as_dataset_load`] and not be used afterwards.
 */
void as_dataset_free(struct AsDataset *ds);

/**
 * # Safety
 * `ds` must be a live dataset handle and `info` a valid pointer.
 */
enum AsStatus as_dataset_info(const struct AsDataset *ds, struct AsDatasetInfo *info);

/**
 * Restores a model from a checkpoint directory (or a run directory holding
 * one) into a new handle stored in `*out`.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum AsStatus as_model_load(const char *dir, struct AsModel **out);

/**
 * Releases a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`as_model_load`] and not be used afterwards.
 */
void as_model_free(struct AsModel *model);

/**
 * Number of action classes the model predicts.
 *
 * # Safety
 * `model` must be a live model handle and `out` a valid pointer.
 */
enum AsStatus as_model_num_actions(const struct AsModel *model, size_t *out);

/**
 * RGB-only inference. `frames` holds `n` clips laid out `[n, T, 3, H, W]`
 * in `[0, 1]` (`frames_len` values); the merged-tower logits `[n, K]` are
 * written to `logits`, which must hold `logits_len >= n * K` values.
 *
 * # Safety
 * `frames` must point to `frames_len` readable floats and `logits` to
 * `logits_len` writable floats.
 */
enum AsStatus as_model_predict(const struct AsModel *model,
                               const float *frames,
                               size_t frames_len,
                               size_t n,
                               float *logits,
                               size_t logits_len);

/**
 * Scores the model's merged predictions on a dataset split.
 *
 * # Safety
 * `model` and `ds` must be live handles and `out` a valid pointer.
 */
enum AsStatus as_model_evaluate(const struct AsModel *model,
                                const struct AsDataset *ds,
                                enum AsSplit split,
                                enum AsMetric metric,
                                double *out);

/**
 * Trains a model on `ds` into the run directory `out_dir`. `config_json`
 * is an experiment configuration document, or NULL for the defaults. The
 * final merged validation top-1 is stored in `*val_top1` when non-NULL.
 *
 * # Safety
 * String arguments must be valid NUL-terminated strings or NULL where
 * allowed; `ds` must be a live handle.
 */
enum AsStatus as_train(const char *config_json,
                       const struct AsDataset *ds,
                       const char *out_dir,
                       double *val_top1);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AIRSTREAMS_H */
