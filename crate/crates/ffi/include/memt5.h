#ifndef MEMT5_H
#define MEMT5_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum Memt5Status {
  MEMT5_STATUS_OK = 0,
  /**
   * Invalid argument or configuration.
   */
  MEMT5_STATUS_USAGE = 1,
  /**
   * Unreadable, malformed or incompatible data.
   */
  MEMT5_STATUS_DATA = 2,
  /**
   * Non-finite values.
   */
  MEMT5_STATUS_NUMERIC = 3,
  MEMT5_STATUS_VERIFICATION = 4,
  MEMT5_STATUS_NULL_POINTER = 5,
  /**
   * Output buffer too small; the required length was written.
   */
  MEMT5_STATUS_BUFFER_TOO_SMALL = 6,
  MEMT5_STATUS_PANIC = 7,
} Memt5Status;

/**
 * Loaded model parameters with their configuration.
 */
typedef struct Memt5Model Memt5Model;

typedef struct Memt5Vocab Memt5Vocab;

typedef struct Memt5AttentionCost {
  uint64_t allowed;
  uint64_t dense;
  double ratio;
} Memt5AttentionCost;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *memt5_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Free the result
 * with [`memt5_string_free`].
 */
char *memt5_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void memt5_string_free(char *s);

/**
 * Loads the parameters stored in a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum Memt5Status memt5_model_load(const char *path, struct Memt5Model **out);

/**
 * Builds a freshly initialized model from a JSON model configuration.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out` must be writable.
 */
enum Memt5Status memt5_model_new(const char *config_json, uint64_t seed, struct Memt5Model **out);

/**
 * # Safety
 * `model` must come from this library and not have been freed.
 */
void memt5_model_free(struct Memt5Model *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum Memt5Status memt5_model_num_params(const struct Memt5Model *model, size_t *out);

/**
 * Encoder capacity (`n_chunks * chunk_len`) and vocabulary size.
 *
 * # Safety
 * `model` must be a live handle; outputs must be writable.
 */
enum Memt5Status memt5_model_dims(const struct Memt5Model *model,
                                  size_t *source_len,
                                  size_t *vocab_size);

/**
 * Greedy decoding of one source sequence (truncated to the encoder
 * capacity). Writes at most `out_cap` ids and sets `out_len` to the
 * generated length, which includes the end-of-sequence id when produced.
 *
 * # Safety
 * `source` must point to `source_len` ids; `out` to `out_cap` writable ids.
 */
enum Memt5Status memt5_model_generate(const struct Memt5Model *model,
                                      const uint32_t *source,
                                      size_t source_len,
                                      size_t max_len,
                                      uint32_t *out,
                                      size_t out_cap,
                                      size_t *out_len);

/**
 * Mean token cross-entropy of `target` given `source`, without dropout.
 *
 * # Safety
 * Pointers must reference `*_len` readable ids; `loss` must be writable.
 */
enum Memt5Status memt5_model_loss(const struct Memt5Model *model,
                                  const uint32_t *source,
                                  size_t source_len,
                                  const uint32_t *target,
                                  size_t target_len,
                                  double *loss);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum Memt5Status memt5_vocab_load(const char *path, struct Memt5Vocab **out);

/**
 * # Safety
 * `vocab` must come from this library and not have been freed.
 */
void memt5_vocab_free(struct Memt5Vocab *vocab);

/**
 * # Safety
 * `vocab` must be a live handle; `out` must be writable.
 */
enum Memt5Status memt5_vocab_size(const struct Memt5Vocab *vocab, size_t *out);

/**
 * Encodes `text` to ids (no end-of-sequence id is appended).
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must hold `out_cap` ids.
 */
enum Memt5Status memt5_vocab_encode(const struct Memt5Vocab *vocab,
                                    const char *text,
                                    uint32_t *out,
                                    size_t out_cap,
                                    size_t *out_len);

/**
 * Decodes ids up to the first end-of-sequence id into a new string; free
 * it with [`memt5_string_free`].
 *
 * # Safety
 * `ids` must point to `len` readable ids; `out` must be writable.
 */
enum Memt5Status memt5_vocab_decode(const struct Memt5Vocab *vocab,
                                    const uint32_t *ids,
                                    size_t len,
                                    char **out);

/**
 * Exact count of admissible encoder attention scores against the dense count.
 *
 * # Safety
 * `out` must be writable.
 */
enum Memt5Status memt5_attention_cost(size_t n_chunks,
                                      size_t chunk_len,
                                      size_t mem_tokens,
                                      struct Memt5AttentionCost *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MEMT5_H */
