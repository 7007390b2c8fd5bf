#ifndef HERS_H
#define HERS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Length of the buffer [`hers_embed_prompt`] fills.
 */
#define HERS_EMBED_DIM 64

typedef enum HersStatus {
  HERS_STATUS_OK = 0,
  HERS_STATUS_NULL_POINTER = 1,
  HERS_STATUS_INVALID_UTF8 = 2,
  HERS_STATUS_INVALID_ARGUMENT = 3,
  HERS_STATUS_NUMERICAL = 4,
  HERS_STATUS_IO = 5,
  HERS_STATUS_CHECKPOINT = 6,
  HERS_STATUS_STAGE = 7,
  HERS_STATUS_PANIC = 8,
} HersStatus;

/**
 * A base model with labeled adapter sets.
 */
typedef struct HersCheckpoint HersCheckpoint;

/**
 * Mean and covariance of a feature distribution.
 */
typedef struct HersGaussian HersGaussian;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or `""`. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *hers_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hers_version(void);

/**
 * Token-level ROUGE-L F1 between two texts after tokenization.
 *
 * # Safety
 * `a` and `b` are NUL-terminated strings; `out` is writable.
 */
enum HersStatus hers_rouge_l(const char *a, const char *b, double *out);

/**
 * Writes the unit-norm trigram embedding of `text` into `out`, which must
 * hold exactly `HERS_EMBED_DIM` values.
 *
 * # Safety
 * `text` is a NUL-terminated string; `out` is writable for `len` values.
 */
enum HersStatus hers_embed_prompt(const char *text, double *out, size_t len);

/**
 * Builds a Gaussian from a mean of length `dim` and a row-major `dim × dim`
 * PSD covariance.
 *
 * # Safety
 * `mean` holds `dim` values, `cov` holds `dim·dim`; `out` is writable.
 */
enum HersStatus hers_gaussian_new(const double *mean,
                                  const double *cov,
                                  size_t dim,
                                  struct HersGaussian **out);

/**
 * Fits mean and unbiased covariance to `rows` samples of width `cols`
 * stored row-major.
 *
 * # Safety
 * `samples` holds `rows·cols` values; `out` is writable.
 */
enum HersStatus hers_gaussian_fit(const double *samples,
                                  size_t rows,
                                  size_t cols,
                                  struct HersGaussian **out);

/**
 * Releases a Gaussian; null is ignored.
 *
 * # Safety
 * `g` is null or came from this library and is not used afterwards.
 */
void hers_gaussian_free(struct HersGaussian *g);

/**
 * Dimension of a Gaussian, or 0 for null.
 *
 * # Safety
 * `g` is null or a live handle.
 */
size_t hers_gaussian_dim(const struct HersGaussian *g);

/**
 * Fréchet distance between two Gaussians.
 *
 * # Safety
 * `real` and `gen` are live handles; `out` is writable.
 */
enum HersStatus hers_fid(const struct HersGaussian *real,
                         const struct HersGaussian *gen,
                         double *out);

/**
 * `KL(p ‖ q)`; `q` must be positive definite.
 *
 * # Safety
 * `p` and `q` are live handles; `out` is writable.
 */
enum HersStatus hers_kl_gaussian(const struct HersGaussian *p,
                                 const struct HersGaussian *q,
                                 double *out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum HersStatus hers_checkpoint_load(const char *path, struct HersCheckpoint **out);

/**
 * Atomically writes a checkpoint file.
 *
 * # Safety
 * `ckpt` is a live handle; `path` is a NUL-terminated string.
 */
enum HersStatus hers_checkpoint_save(const struct HersCheckpoint *ckpt, const char *path);

/**
 * Releases a checkpoint; null is ignored.
 *
 * # Safety
 * `ckpt` is null or came from this library and is not used afterwards.
 */
void hers_checkpoint_free(struct HersCheckpoint *ckpt);

/**
 * Number of labeled adapter sets, or 0 for null.
 *
 * # Safety
 * `ckpt` is null or a live handle.
 */
size_t hers_checkpoint_adapter_sets(const struct HersCheckpoint *ckpt);

/**
 * Merges every adapter set except `merged` factor-wise and stores the
 * result under the `merged` label, replacing any previous merge.
 *
 * # Safety
 * `ckpt` is a live handle.
 */
enum HersStatus hers_checkpoint_merge(struct HersCheckpoint *ckpt);

/**
 * Runs every pipeline stage into `out_dir`. A null `config_path` uses the
 * default configuration.
 *
 * # Safety
 * `config_path` is null or a NUL-terminated string; `out_dir` is one.
 */
enum HersStatus hers_run_all(const char *config_path, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HERS_H */
