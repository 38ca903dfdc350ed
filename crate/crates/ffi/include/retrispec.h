#ifndef RETRISPEC_H
#define RETRISPEC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RetrispecStatus {
  RETRISPEC_STATUS_OK = 0,
  RETRISPEC_STATUS_NULL_POINTER = 1,
  RETRISPEC_STATUS_INVALID_INPUT = 2,
  RETRISPEC_STATUS_CONFIG = 3,
  RETRISPEC_STATUS_IO = 4,
  RETRISPEC_STATUS_DATA = 5,
  RETRISPEC_STATUS_STRUCTURAL = 6,
  RETRISPEC_STATUS_BUFFER_TOO_SMALL = 7,
  RETRISPEC_STATUS_PANIC = 8,
} RetrispecStatus;

typedef enum RetrispecPolicyMode {
  RETRISPEC_POLICY_MODE_GREEDY = 0,
  RETRISPEC_POLICY_MODE_TOP_K = 1,
  RETRISPEC_POLICY_MODE_TOP_P = 2,
  RETRISPEC_POLICY_MODE_RELAXED = 3,
} RetrispecPolicyMode;

// Opaque n-gram reference model.
typedef struct RetrispecModel RetrispecModel;

// Opaque retrieval pool.
typedef struct RetrispecPool RetrispecPool;

// Token ids are dense integers below the model's vocabulary size.
typedef uint32_t RetrispecToken;

typedef struct RetrispecDecodeStats {
  uint64_t tokens_generated;
  uint64_t model_calls;
  uint64_t accepted_draft_tokens;
  uint64_t draft_steps;
  uint64_t fallback_steps;
  double retrieval_seconds;
  double wall_seconds;
} RetrispecDecodeStats;

typedef struct RetrispecPolicy {
  enum RetrispecPolicyMode mode;
  size_t k;
  double p;
} RetrispecPolicy;

// Draft retrieval settings. Zero fields take the library defaults.
typedef struct RetrispecDraftParams {
  size_t max_draft_tokens;
  size_t prefix_max;
  size_t prefix_min;
  double backoff_retry_fraction;
} RetrispecDraftParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` as a
// NUL-terminated string, truncating if needed. Returns the full message
// length excluding the terminator.
//
// # Safety
// `buf` must be null or valid for `cap` bytes.
size_t retrispec_last_error(char *buf, size_t cap);

// Fits an add-alpha n-gram model. Sequences are concatenated in `tokens`
// with their lengths in `lengths`.
//
// # Safety
// `tokens` must hold the sum of `lengths` ids, `lengths` must hold
// `num_sequences` entries and `out` must be writable.
enum RetrispecStatus retrispec_model_fit(const RetrispecToken *tokens,
                                         const size_t *lengths,
                                         size_t num_sequences,
                                         size_t order,
                                         double alpha,
                                         size_t vocab_size,
                                         struct RetrispecModel **out);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum RetrispecStatus retrispec_model_load(const char *path, struct RetrispecModel **out);

// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum RetrispecStatus retrispec_model_save(const struct RetrispecModel *model, const char *path);

// # Safety
// `model` must be null or a handle not yet freed.
void retrispec_model_free(struct RetrispecModel *model);

// Vocabulary size of the model, or 0 for a null handle.
//
// # Safety
// `model` must be null or a live handle.
size_t retrispec_model_vocab_size(const struct RetrispecModel *model);

// Writes the next-token distribution after `context` into `probs`, which
// must hold `vocab_size` doubles.
//
// # Safety
// `context` must hold `context_len` ids and `probs` must be valid for `cap` doubles.
enum RetrispecStatus retrispec_model_next_distribution(const struct RetrispecModel *model,
                                                       const RetrispecToken *context,
                                                       size_t context_len,
                                                       double *probs,
                                                       size_t cap);

// Creates an empty pool. A `max_branch_depth` of 0 selects the default.
//
// # Safety
// `group_id` must be a NUL-terminated UTF-8 string and `out` writable.
enum RetrispecStatus retrispec_pool_new(const char *group_id,
                                        size_t vocab_size,
                                        size_t max_branch_depth,
                                        struct RetrispecPool **out);

// Indexes one knowledge text (all of its suffixes) into the pool.
//
// # Safety
// `pool` must be a live handle and `tokens` hold `len` ids.
enum RetrispecStatus retrispec_pool_insert_text(struct RetrispecPool *pool,
                                                const RetrispecToken *tokens,
                                                size_t len);

// Number of knowledge texts inserted, or 0 for a null handle.
//
// # Safety
// `pool` must be null or a live handle.
uint64_t retrispec_pool_size_entries(const struct RetrispecPool *pool);

// # Safety
// `pool` must be a live handle and `path` a NUL-terminated string.
enum RetrispecStatus retrispec_pool_save(const struct RetrispecPool *pool, const char *path);

// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum RetrispecStatus retrispec_pool_load(const char *path, struct RetrispecPool **out);

// # Safety
// `pool` must be null or a handle not yet freed.
void retrispec_pool_free(struct RetrispecPool *pool);

// Greedy autoregressive decoding. Generated tokens (including a final EOS)
// go to `out_tokens`; `stats` may be null.
//
// # Safety
// Handles must be live; `prompt` must hold `prompt_len` ids; `out_tokens`
// must be valid for `cap` ids; `out_len` must be writable.
enum RetrispecStatus retrispec_decode_autoregressive(const struct RetrispecModel *model,
                                                     const RetrispecToken *prompt,
                                                     size_t prompt_len,
                                                     size_t max_new_tokens,
                                                     RetrispecToken eos,
                                                     RetrispecToken *out_tokens,
                                                     size_t cap,
                                                     size_t *out_len,
                                                     struct RetrispecDecodeStats *stats);

// Retrieval-drafted speculative decoding against `pool`. `params` may be
// null for defaults. Output conventions match
// [`retrispec_decode_autoregressive`].
//
// # Safety
// As for [`retrispec_decode_autoregressive`]; `pool` must be live and
// `params` null or valid.
enum RetrispecStatus retrispec_decode_speculative(const struct RetrispecModel *model,
                                                  const struct RetrispecPool *pool,
                                                  const RetrispecToken *prompt,
                                                  size_t prompt_len,
                                                  struct RetrispecPolicy policy,
                                                  const struct RetrispecDraftParams *params,
                                                  size_t max_new_tokens,
                                                  RetrispecToken eos,
                                                  RetrispecToken *out_tokens,
                                                  size_t cap,
                                                  size_t *out_len,
                                                  struct RetrispecDecodeStats *stats);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RETRISPEC_H */
