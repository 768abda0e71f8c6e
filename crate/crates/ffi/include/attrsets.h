#ifndef ATTRSETS_H
#define ATTRSETS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define ATTRSETS_LOSS_SQUARE 0

#define ATTRSETS_LOSS_LOGLOSS 1

typedef enum AttrsetsStatus {
  ATTRSETS_STATUS_OK = 0,
  ATTRSETS_STATUS_NULL_POINTER = 1,
  ATTRSETS_STATUS_DOMAIN = 2,
  ATTRSETS_STATUS_DEGENERATE = 3,
  ATTRSETS_STATUS_CONFIG = 4,
  ATTRSETS_STATUS_DIMENSION = 5,
  ATTRSETS_STATUS_PANIC = 6,
  ATTRSETS_STATUS_INTERNAL = 7,
} AttrsetsStatus;

/**
 * Opaque estimator handle.
 */
typedef struct AttrsetsEstimator AttrsetsEstimator;

/**
 * Opaque prior handle.
 */
typedef struct AttrsetsPrior AttrsetsPrior;

typedef struct AttrsetsBeta {
  double beta1;
  double beta0;
  /**
   * P(Bin(n, p) >= j + k).
   */
  double tail;
} AttrsetsBeta;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated, truncated to
 * `len`). Returns the full message length plus one, or 0 when there is no error.
 */
size_t attrsets_last_error(char *buf, size_t len);

/**
 * P(Bin(n, p) >= threshold).
 */
enum AttrsetsStatus attrsets_binomial_tail(uint64_t n, double p, uint64_t threshold, double *out);

/**
 * Coefficients for conversion ordinal `j` (1-based), window size `k` and prior weight `pi_i`.
 */
enum AttrsetsStatus attrsets_beta_coefficients(uint64_t n,
                                               double p,
                                               size_t j,
                                               size_t k,
                                               double pi_i,
                                               struct AttrsetsBeta *out);

/**
 * Prior from `k` non-negative weights summing to one.
 */
enum AttrsetsStatus attrsets_prior_new(const double *weights, size_t k, struct AttrsetsPrior **out);

enum AttrsetsStatus attrsets_prior_uniform(size_t k, struct AttrsetsPrior **out);

/**
 * Weights proportional to 2^-(k - r) for position r.
 */
enum AttrsetsStatus attrsets_prior_exponential(size_t k, struct AttrsetsPrior **out);

enum AttrsetsStatus attrsets_prior_k(const struct AttrsetsPrior *prior, size_t *out);

/**
 * Sum of squared weights.
 */
enum AttrsetsStatus attrsets_prior_sigma(const struct AttrsetsPrior *prior, double *out);

void attrsets_prior_free(struct AttrsetsPrior *prior);

/**
 * Estimator for a stream of length `n` with rate `p`. `loss` is one of the
 * `ATTRSETS_LOSS_*` constants; `clip` is read only for log loss. `j_max = 0` keeps the
 * default ordinal cap.
 */
enum AttrsetsStatus attrsets_estimator_new(size_t n,
                                           double p,
                                           const struct AttrsetsPrior *prior,
                                           uint32_t loss,
                                           double clip,
                                           size_t j_max,
                                           struct AttrsetsEstimator **out);

void attrsets_estimator_free(struct AttrsetsEstimator *estimator);

/**
 * Means of f1 and f2 over `len` predictions.
 */
enum AttrsetsStatus attrsets_estimator_moments(const struct AttrsetsEstimator *estimator,
                                               const double *predictions,
                                               size_t len,
                                               double *e_f1,
                                               double *e_f2);

/**
 * Aggregate estimate over `m` sets given as an `m * k` row-major array of stream indices,
 * ordered by conversion, with predictions `h` for all `n` stream points.
 */
enum AttrsetsStatus attrsets_estimator_aggregate(const struct AttrsetsEstimator *estimator,
                                                 const size_t *set_indices,
                                                 size_t m,
                                                 const double *h,
                                                 size_t n,
                                                 double e_f1,
                                                 double e_f2,
                                                 double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *attrsets_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ATTRSETS_H */
