#ifndef MOELAB_H
#define MOELAB_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum MoelabStatus {
  MOELAB_STATUS_OK = 0,
  MOELAB_STATUS_NULL_POINTER = 1,
  MOELAB_STATUS_INVALID_UTF8 = 2,
  MOELAB_STATUS_SHAPE = 3,
  MOELAB_STATUS_ARGUMENT = 4,
  MOELAB_STATUS_CONFIG = 5,
  MOELAB_STATUS_EVALUATION = 6,
  MOELAB_STATUS_STRUCTURE = 7,
  MOELAB_STATUS_PRECONDITION = 8,
  MOELAB_STATUS_CHECKPOINT = 9,
  MOELAB_STATUS_NON_FINITE_LOSS = 10,
  MOELAB_STATUS_IO = 11,
  MOELAB_STATUS_JSON = 12,
  /**
   * The caller's buffer is too small; the required size was reported.
   */
  MOELAB_STATUS_BUFFER_TOO_SMALL = 13,
  MOELAB_STATUS_PANIC = 14,
} MoelabStatus;

/**
 * Equivalence verdict of [`moelab_verify`].
 */
typedef enum MoelabVerdict {
  MOELAB_VERDICT_EQUIVALENT = 0,
  MOELAB_VERDICT_NEAR_EQUIVALENT = 1,
  MOELAB_VERDICT_NOT_EQUIVALENT = 2,
} MoelabVerdict;

/**
 * Parsed lab configuration.
 */
typedef struct MoelabConfig MoelabConfig;

/**
 * A dense or MoE block stack.
 */
typedef struct MoelabModel MoelabModel;

/**
 * Training state over an owned copy of a model.
 */
typedef struct MoelabTrainer MoelabTrainer;

/**
 * Losses of one training step.
 */
typedef struct MoelabStepLoss {
  uint64_t step;
  double total;
  double mse;
  double aux;
  double lr;
} MoelabStepLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to fit. Returns the full message length
 * in bytes (excluding the terminator).
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t moelab_last_error(char *buf, size_t len);

/**
 * Parses a JSON lab config; fields it omits take their defaults.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be writable.
 */
enum MoelabStatus moelab_config_from_json(const char *json, struct MoelabConfig **out);

/**
 * # Safety
 * `cfg` must be null or a handle from [`moelab_config_from_json`], not yet freed.
 */
void moelab_config_free(struct MoelabConfig *cfg);

/**
 * Builds the dense base model described by the config.
 *
 * # Safety
 * `cfg` must be a live config handle; `out` must be writable.
 */
enum MoelabStatus moelab_model_dense(const struct MoelabConfig *cfg, struct MoelabModel **out);

/**
 * Converts a dense model into an MoE model under the config's conversion
 * and gate sections.
 *
 * # Safety
 * `dense` and `cfg` must be live handles; `out` must be writable.
 */
enum MoelabStatus moelab_model_convert(const struct MoelabModel *dense,
                                       const struct MoelabConfig *cfg,
                                       struct MoelabModel **out);

/**
 * Loads a checkpoint directory.
 *
 * # Safety
 * `dir` must be a NUL-terminated path; `out` must be writable.
 */
enum MoelabStatus moelab_model_load(const char *dir, struct MoelabModel **out);

/**
 * Writes a checkpoint directory.
 *
 * # Safety
 * `model` must be a live handle; `dir` a NUL-terminated path.
 */
enum MoelabStatus moelab_model_save(const struct MoelabModel *model,
                                    const char *dir,
                                    uint64_t seed);

/**
 * # Safety
 * `model` must be null or a live model handle.
 */
void moelab_model_free(struct MoelabModel *model);

/**
 * Hidden width, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t moelab_model_hidden_dim(const struct MoelabModel *model);

/**
 * Total parameter count, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live model handle.
 */
size_t moelab_model_param_count(const struct MoelabModel *model);

/**
 * Runs the model on `n_tokens` row-major tokens of the model's hidden width,
 * writing `n_tokens × hidden` outputs. Models with a cross-attention gate
 * need encoder states and are rejected here.
 *
 * # Safety
 * `tokens` must point to `n_tokens × hidden` readable values and `out` to as
 * many writable ones.
 */
enum MoelabStatus moelab_model_forward(const struct MoelabModel *model,
                                       const double *tokens,
                                       size_t n_tokens,
                                       double *out);

/**
 * Certifies `moe` against `dense` on `probes` seeded batches of `tokens`
 * tokens each.
 *
 * # Safety
 * Handles must be live; `max_abs_dev` and `verdict` must be writable.
 */
enum MoelabStatus moelab_verify(const struct MoelabModel *dense,
                                const struct MoelabModel *moe,
                                size_t probes,
                                size_t tokens,
                                uint64_t seed,
                                double *max_abs_dev,
                                enum MoelabVerdict *verdict);

/**
 * Starts training a copy of `model` under `cfg`.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum MoelabStatus moelab_trainer_new(const struct MoelabModel *model,
                                     const struct MoelabConfig *cfg,
                                     struct MoelabTrainer **out);

/**
 * Runs one optimization step.
 *
 * # Safety
 * `trainer` must be a live handle; `loss` must be null or writable.
 */
enum MoelabStatus moelab_trainer_step(struct MoelabTrainer *trainer, struct MoelabStepLoss *loss);

/**
 * Copies the trainer's current model into a new handle.
 *
 * # Safety
 * `trainer` must be a live handle; `out` must be writable.
 */
enum MoelabStatus moelab_trainer_model(const struct MoelabTrainer *trainer,
                                       struct MoelabModel **out);

/**
 * Writes the routing-health report of the steps so far as NUL-terminated
 * JSON into `buf`. `written` receives the JSON length; when it does not fit,
 * nothing is written and [`MoelabStatus::BufferTooSmall`] is returned.
 *
 * # Safety
 * `trainer` must be a live handle; `buf` null or `len` writable bytes;
 * `written` writable.
 */
enum MoelabStatus moelab_trainer_report_json(struct MoelabTrainer *trainer,
                                             char *buf,
                                             size_t len,
                                             size_t *written);

/**
 * # Safety
 * `trainer` must be null or a live trainer handle.
 */
void moelab_trainer_free(struct MoelabTrainer *trainer);

/**
 * Nearest bfloat16 value (ties to even; subnormals flush to zero).
 */
double moelab_bf16_round(double x);

/**
 * Spacing of the bfloat16 grid at `|x|`.
 */
double moelab_ulp_bf16(double x);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MOELAB_H */
