#ifndef OTCL_H
#define OTCL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum OtclStatus {
  OTCL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  OTCL_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  OTCL_STATUS_INVALID_UTF8 = 2,
  OTCL_STATUS_CONFIG = 3,
  OTCL_STATUS_DATA = 4,
  OTCL_STATUS_NUMERICAL = 5,
  OTCL_STATUS_IO = 6,
  OTCL_STATUS_CHECKPOINT = 7,
  /**
   * A caller-supplied buffer was too small.
   */
  OTCL_STATUS_BUFFER_TOO_SMALL = 8,
  /**
   * An unexpected internal failure (including a caught panic).
   */
  OTCL_STATUS_INTERNAL = 9,
} OtclStatus;

/**
 * A run configuration.
 */
typedef struct OtclConfig OtclConfig;

/**
 * The outcome of a finished experiment.
 */
typedef struct OtclExperiment OtclExperiment;

/**
 * A trained learner loaded from a checkpoint.
 */
typedef struct OtclLearner OtclLearner;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *otcl_version(void);

/**
 * Copies the last error message of this thread into `buf`.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null; `needed` must be null or
 * point to writable memory.
 */
enum OtclStatus otcl_last_error(char *buf, size_t len, size_t *needed);

/**
 * Creates a configuration holding the defaults.
 *
 * # Safety
 * `out` must point to writable memory.
 */
enum OtclStatus otcl_config_new(struct OtclConfig **out);

/**
 * Parses a TOML configuration; missing fields take their defaults.
 *
 * # Safety
 * `toml` must be a NUL-terminated string; `out` must point to writable
 * memory.
 */
enum OtclStatus otcl_config_from_toml(const char *toml, struct OtclConfig **out);

/**
 * Writes the configuration as TOML into `buf`.
 *
 * # Safety
 * `cfg` must be a live handle; `buf` must be valid for `len` bytes or null;
 * `needed` must be null or writable.
 */
enum OtclStatus otcl_config_to_toml(const struct OtclConfig *cfg,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

/**
 * # Safety
 * `cfg` must be null or a handle from this library not yet freed.
 */
void otcl_config_free(struct OtclConfig *cfg);

/**
 * Loads the configured dataset and runs every seed.
 *
 * # Safety
 * `cfg` must be a live handle; `out` must point to writable memory.
 */
enum OtclStatus otcl_experiment_run(const struct OtclConfig *cfg, struct OtclExperiment **out);

/**
 * Mean over seeds of the final average accuracy.
 *
 * # Safety
 * `exp` must be a live handle; `out` must point to writable memory.
 */
enum OtclStatus otcl_experiment_mean_accuracy(const struct OtclExperiment *exp, double *out);

/**
 * Mean over seeds of the final average forgetting.
 *
 * # Safety
 * `exp` must be a live handle; `out` must point to writable memory.
 */
enum OtclStatus otcl_experiment_mean_forgetting(const struct OtclExperiment *exp, double *out);

/**
 * Copies the JSON summary of the experiment into `buf`.
 *
 * # Safety
 * `exp` must be a live handle; `buf` must be valid for `len` bytes or null;
 * `needed` must be null or writable.
 */
enum OtclStatus otcl_experiment_summary_json(const struct OtclExperiment *exp,
                                             char *buf,
                                             size_t len,
                                             size_t *needed);

/**
 * Takes the learner of the experiment's first seed as a new handle.
 *
 * # Safety
 * `exp` must be a live handle; `out` must point to writable memory.
 */
enum OtclStatus otcl_experiment_learner(const struct OtclExperiment *exp, struct OtclLearner **out);

/**
 * # Safety
 * `exp` must be null or a handle from this library not yet freed.
 */
void otcl_experiment_free(struct OtclExperiment *exp);

/**
 * Loads a learner from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * memory.
 */
enum OtclStatus otcl_learner_load(const char *path, struct OtclLearner **out);

/**
 * # Safety
 * `learner` must be null or a handle from this library not yet freed.
 */
void otcl_learner_free(struct OtclLearner *learner);

/**
 * Input and feature dimensions of the learner.
 *
 * # Safety
 * `learner` must be a live handle; `input_dim` and `feat_dim` must point to
 * writable memory.
 */
enum OtclStatus otcl_learner_dims(const struct OtclLearner *learner,
                                  size_t *input_dim,
                                  size_t *feat_dim);

/**
 * Predicts the class of each of the `rows` row-major inputs of width `dim`,
 * writing `rows` labels to `labels`.
 *
 * # Safety
 * `x` must hold `rows * dim` doubles; `labels` must hold `rows` entries.
 */
enum OtclStatus otcl_learner_predict(const struct OtclLearner *learner,
                                     const double *x,
                                     size_t rows,
                                     size_t dim,
                                     size_t *labels);

/**
 * Writes the features of each input row (row-major, `rows * feat_dim`
 * doubles) to `out`; `out_len` is its capacity in doubles.
 *
 * # Safety
 * `x` must hold `rows * dim` doubles; `out` must hold `out_len` doubles.
 */
enum OtclStatus otcl_learner_embed(const struct OtclLearner *learner,
                                   const double *x,
                                   size_t rows,
                                   size_t dim,
                                   double *out,
                                   size_t out_len);

/**
 * Entropic optimal transport value between two uniform point clouds of
 * width `dim` under squared Euclidean cost.
 *
 * # Safety
 * `a` must hold `n * dim` doubles, `b` must hold `m * dim` doubles, `out`
 * must be writable.
 */
enum OtclStatus otcl_sinkhorn_uniform(const double *a,
                                      size_t n,
                                      const double *b,
                                      size_t m,
                                      size_t dim,
                                      double epsilon,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OTCL_H */
