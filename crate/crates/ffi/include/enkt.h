#ifndef ENKT_H
#define ENKT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EnktStatus {
  ENKT_STATUS_OK = 0,
  ENKT_STATUS_NULL_POINTER = 1,
  ENKT_STATUS_INVALID_ARGUMENT = 2,
  ENKT_STATUS_IO = 3,
  ENKT_STATUS_FORMAT = 4,
  ENKT_STATUS_COMPATIBILITY = 5,
  ENKT_STATUS_EMPTY_MODEL = 6,
  ENKT_STATUS_DIMENSION = 7,
  ENKT_STATUS_NUMERIC = 8,
  ENKT_STATUS_CONFIG = 9,
  ENKT_STATUS_PANIC = 10,
  ENKT_STATUS_OTHER = 11,
} EnktStatus;

/**
 * Opaque scoring handle.
 */
typedef struct EnktModel EnktModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a model container. `config_path` may be null for the default
 * configuration; its `score.backend` key selects the back-end.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum EnktStatus enkt_model_load(const char *model_path,
                                const char *config_path,
                                struct EnktModel **out);

/**
 * Releases a handle from [`enkt_model_load`]; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, not freed before.
 */
void enkt_model_free(struct EnktModel *model);

/**
 * Embedding dimension the model scores.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum EnktStatus enkt_model_dim(const struct EnktModel *model, size_t *out);

/**
 * Scores one trial: `k` enrollment embeddings stored row-major in
 * `enroll` (`k × dim`) against `test` (`dim`). The attention back-end
 * writes its calibrated probability, the others their raw score.
 *
 * # Safety
 * `enroll` must hold `k·dim` doubles, `test` `dim` doubles; `out` writable.
 */
enum EnktStatus enkt_score_trial(const struct EnktModel *model,
                                 const double *enroll,
                                 size_t k,
                                 const double *test,
                                 size_t dim,
                                 double *out);

/**
 * Equal error rate (a fraction) of `n` scores with 0/1 labels.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` writable.
 */
enum EnktStatus enkt_eer(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * Normalized minimum detection cost at `p_target` with costs `c_miss`, `c_fa`.
 *
 * # Safety
 * `scores` and `labels` must hold `n` elements; `out` writable.
 */
enum EnktStatus enkt_min_dcf(const double *scores,
                             const uint8_t *labels,
                             size_t n,
                             double p_target,
                             double c_miss,
                             double c_fa,
                             double *out);

/**
 * Copies this thread's last error message into `buf` (truncated,
 * NUL-terminated) and returns its full length in bytes, 0 if none.
 *
 * # Safety
 * `buf` must be null or hold `len` writable bytes.
 */
size_t enkt_last_error(char *buf, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ENKT_H */
