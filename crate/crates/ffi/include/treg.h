#ifndef TREG_H
#define TREG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum TregBase {
  TREG_BASE_DPO = 0,
  TREG_BASE_SIMPO = 1,
} TregBase;

typedef enum TregRegularize {
  TREG_REGULARIZE_BOTH_OUTPUTS = 0,
  TREG_REGULARIZE_CHOSEN_ONLY = 1,
  TREG_REGULARIZE_OFF = 2,
} TregRegularize;

/**
 * Result of every fallible call.
 */
typedef enum TregStatus {
  TREG_STATUS_OK = 0,
  TREG_STATUS_NULL_POINTER = 1,
  TREG_STATUS_INVALID_ARGUMENT = 2,
  TREG_STATUS_BUFFER_TOO_SMALL = 3,
  TREG_STATUS_IO = 4,
  TREG_STATUS_MODEL = 5,
  TREG_STATUS_REWARD = 6,
  TREG_STATUS_LOSS = 7,
  TREG_STATUS_PANIC = 8,
} TregStatus;

typedef enum TregWeighting {
  TREG_WEIGHTING_SEQUENCE = 0,
  TREG_WEIGHTING_STATIC = 1,
} TregWeighting;

/**
 * Opaque model handle.
 */
typedef struct TregModel TregModel;

typedef struct TregModelConfig {
  size_t vocab_size;
  size_t context_len;
  size_t d_model;
  size_t n_layers;
  size_t n_heads;
  uint64_t seed;
} TregModelConfig;

typedef struct TregLossConfig {
  double beta;
  double alpha;
  enum TregBase base;
  enum TregWeighting weighting;
  enum TregRegularize regularize;
  double sft_coeff;
  double simpo_gamma;
} TregLossConfig;

/**
 * Per-pair loss components.
 */
typedef struct TregLossBreakdown {
  double base_loss;
  double reg_loss_w;
  double reg_loss_l;
  double weight;
  double sft_loss;
  double total;
  double reward_margin;
} TregLossBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread ("" after a success).
 * Valid until the next call on the same thread.
 */
const char *treg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *treg_version(void);

/**
 * Default model configuration.
 */
struct TregModelConfig treg_model_config_default(void);

/**
 * Default loss configuration (DPO base with contrastive regularization).
 */
struct TregLossConfig treg_loss_config_default(void);

/**
 * Freshly initialised trainable model.
 *
 * # Safety
 * `config` must point to a valid config and `out` to writable storage.
 */
enum TregStatus treg_model_init(const struct TregModelConfig *config, struct TregModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum TregStatus treg_model_load(const char *path, struct TregModel **out);

/**
 * Writes `model` to a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum TregStatus treg_model_save(const struct TregModel *model, const char *path);

/**
 * Frozen copy of `model`, usable as reference or evaluator.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum TregStatus treg_model_freeze(const struct TregModel *model, struct TregModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void treg_model_free(struct TregModel *model);

/**
 * Number of scalar parameters.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t treg_model_parameter_count(const struct TregModel *model);

/**
 * Tokens of `[BOS] instruction [SEP]`.
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must hold `cap` elements.
 */
enum TregStatus treg_encode_prompt(const char *text, uint32_t *out, size_t cap, size_t *out_len);

/**
 * Tokens of `response [EOS]`.
 *
 * # Safety
 * As [`treg_encode_prompt`].
 */
enum TregStatus treg_encode_response(const char *text, uint32_t *out, size_t cap, size_t *out_len);

/**
 * `log π(tokens[p] | tokens[..p])` for `p` in `prompt_len..len`.
 *
 * # Safety
 * `tokens` must hold `len` elements; `out` must hold `cap` elements.
 */
enum TregStatus treg_response_logprobs(const struct TregModel *model,
                                       const uint32_t *tokens,
                                       size_t len,
                                       size_t prompt_len,
                                       double *out,
                                       size_t cap,
                                       size_t *out_len);

/**
 * Contrastive token rewards of `answer [EOS]` from a frozen evaluator:
 * one value in [-0.5, 0.5] per response token.
 *
 * # Safety
 * Strings must be NUL-terminated; `out` must hold `cap` elements.
 */
enum TregStatus treg_contrastive_rewards(const struct TregModel *evaluator,
                                         const char *instruction,
                                         const char *answer,
                                         double *out,
                                         size_t cap,
                                         size_t *out_len);

/**
 * Loss components of one preference pair.
 *
 * `prompt`, `chosen` and `rejected` are token arrays (responses end with
 * EOS). `rewards_w` / `rewards_l` hold one contrastive reward per response
 * token; they may be null only when the config does not regularize.
 *
 * # Safety
 * Every non-null array must hold the stated number of elements.
 */
enum TregStatus treg_pair_loss(const struct TregModel *policy,
                               const struct TregModel *reference,
                               const struct TregLossConfig *config,
                               const uint32_t *prompt,
                               size_t prompt_len,
                               const uint32_t *chosen,
                               size_t chosen_len,
                               const uint32_t *rejected,
                               size_t rejected_len,
                               const double *rewards_w,
                               const double *rewards_l,
                               struct TregLossBreakdown *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TREG_H */
