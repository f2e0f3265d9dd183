#ifndef HEALTHQA_H
#define HEALTHQA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum HqaStatus {
  HQA_STATUS_OK = 0,
  HQA_STATUS_NULL_ARGUMENT = 1,
  HQA_STATUS_INVALID_UTF8 = 2,
  HQA_STATUS_IO = 3,
  HQA_STATUS_PARSE = 4,
  HQA_STATUS_NOT_FOUND = 5,
  HQA_STATUS_INVALID_CONFIG = 6,
  HQA_STATUS_RUNTIME = 7,
  HQA_STATUS_PANIC = 8,
} HqaStatus;

/**
 * Opaque BM25 index handle.
 */
typedef struct HqaIndex HqaIndex;

/**
 * Opaque pipeline handle: store, index, reader and retrieval settings.
 */
typedef struct HqaPipeline HqaPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, e.g. "0.1.0". Static storage; do not free.
 */
const char *hqa_version(void);

/**
 * Message for the last failure on this thread, or null if none. Valid until
 * the next failing call on the same thread; do not free.
 */
const char *hqa_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void hqa_string_free(char *s);

/**
 * Ingests `n_inputs` files into the store at `out_dir`. On success
 * `*stats_json` (if non-null) receives the ingestion counters as JSON.
 *
 * # Safety
 * Pointers must be valid NUL-terminated strings; `inputs` must hold `n_inputs` of them.
 */
enum HqaStatus hqa_ingest(const char *const *inputs,
                          size_t n_inputs,
                          const char *out_dir,
                          char **stats_json);

/**
 * Builds an index over the store at `corpus_dir` with default options and
 * writes it to `out_path`.
 *
 * # Safety
 * Pointers must be valid NUL-terminated strings.
 */
enum HqaStatus hqa_index_build(const char *corpus_dir, const char *out_path);

/**
 * Opens an index file. On success `*out` receives a handle to release with
 * [`hqa_index_free`].
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum HqaStatus hqa_index_open(const char *path, struct HqaIndex **out);

/**
 * Top-`k` BM25 search. `*results_json` receives a JSON array of
 * `{"pmid", "score", "rank"}` objects.
 *
 * # Safety
 * `index` must be a live handle; other pointers valid.
 */
enum HqaStatus hqa_index_search(const struct HqaIndex *index,
                                const char *query,
                                size_t k,
                                char **results_json);

/**
 * Releases an index handle. Null is ignored.
 *
 * # Safety
 * `index` must come from [`hqa_index_open`] and not have been freed already.
 */
void hqa_index_free(struct HqaIndex *index);

/**
 * Opens the pipeline described by an optional config file plus `KEY=VALUE`
 * overrides (same keys as the command line). `config_path` may be null.
 *
 * # Safety
 * Pointers must be valid; `overrides` must hold `n_overrides` strings.
 */
enum HqaStatus hqa_pipeline_open(const char *config_path,
                                 const char *const *overrides,
                                 size_t n_overrides,
                                 struct HqaPipeline **out);

/**
 * Answers one question. `*answer_json` receives the full answer record
 * (verdict, evidence, vote counts) as JSON.
 *
 * # Safety
 * `pipeline` must be a live handle; other pointers valid.
 */
enum HqaStatus hqa_pipeline_answer(const struct HqaPipeline *pipeline,
                                   const char *question,
                                   char **answer_json);

/**
 * Releases a pipeline handle. Null is ignored.
 *
 * # Safety
 * `pipeline` must come from [`hqa_pipeline_open`] and not have been freed already.
 */
void hqa_pipeline_free(struct HqaPipeline *pipeline);

/**
 * Majority vote over label codes (0 refuted, 1 supported, 2 nei). `ternary`
 * selects three-way voting; otherwise NEI votes are discarded.
 *
 * # Safety
 * `labels` must point to `n` bytes (may be null when `n == 0`); `out` must be valid.
 */
enum HqaStatus hqa_majority_vote(const uint8_t *labels, size_t n, bool ternary, uint8_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEALTHQA_H */
