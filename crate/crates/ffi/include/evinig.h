#ifndef EVINIG_H
#define EVINIG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes shared by every fallible entry point.
 */
typedef enum EvinigStatus {
  EVINIG_STATUS_OK = 0,
  EVINIG_STATUS_NULL_POINTER = 1,
  /**
   * Out-of-domain value, bad configuration or undersized input.
   */
  EVINIG_STATUS_INVALID_ARGUMENT = 2,
  EVINIG_STATUS_SHAPE = 3,
  EVINIG_STATUS_DATA = 4,
  EVINIG_STATUS_FORMAT = 5,
  EVINIG_STATUS_IO = 6,
  EVINIG_STATUS_NUMERICAL = 7,
  EVINIG_STATUS_DEGENERATE_DATA = 8,
  /**
   * The library panicked; the handle involved should not be reused.
   */
  EVINIG_STATUS_PANIC = 9,
} EvinigStatus;

/**
 * Values accepted wherever a `mixture` argument is expected.
 */
typedef enum EvinigMixture {
  EVINIG_MIXTURE_SYMMETRIC = 0,
  EVINIG_MIXTURE_VERBATIM = 1,
} EvinigMixture;

/**
 * Opaque model handle.
 */
typedef struct EvinigModel EvinigModel;

/**
 * Normal-inverse-gamma parameters.
 */
typedef struct EvinigNig {
  double delta;
  double gamma;
  double alpha;
  double beta;
} EvinigNig;

/**
 * Expected change with its aleatoric and epistemic parts.
 */
typedef struct EvinigUncertainty {
  double d;
  double al;
  double ep;
} EvinigUncertainty;

typedef struct EvinigModelConfig {
  size_t window;
  size_t channels;
  size_t projected;
  size_t decoder_hidden;
  /**
   * One of [`EvinigMixture`].
   */
  int mixture;
} EvinigModelConfig;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *evinig_version(void);

/**
 * Message of the last failure on the calling thread, or an empty string.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *evinig_last_error(void);

/**
 * Checks that `p` is a valid parameter set (finite `delta`, positive
 * `gamma` and `beta`, `alpha > 1`).
 *
 * # Safety
 * `p` must be null or point to a readable `EvinigNig`.
 */
enum EvinigStatus evinig_nig_validate(const struct EvinigNig *p);

/**
 * Mixture of two parameter sets.
 *
 * # Safety
 * `a` and `b` must be null or readable; `out` must be null or writable.
 */
enum EvinigStatus evinig_nig_mix(const struct EvinigNig *a,
                                 const struct EvinigNig *b,
                                 int mode,
                                 struct EvinigNig *out);

/**
 * # Safety
 * `p` must be null or readable; `out` must be null or writable.
 */
enum EvinigStatus evinig_nig_uncertainty(const struct EvinigNig *p, struct EvinigUncertainty *out);

/**
 * Normal-inverse-gamma joint density at `(mu, sigma2)`.
 *
 * # Safety
 * `p` must be null or readable; `out` must be null or writable.
 */
enum EvinigStatus evinig_nig_pdf(const struct EvinigNig *p, double mu, double sigma2, double *out);

/**
 * Default hyperparameters.
 */
struct EvinigModelConfig evinig_model_config_default(void);

/**
 * Randomly initialized model. On success `*out` owns a new handle.
 *
 * # Safety
 * `config` must be null or readable; `out` must be null or writable.
 */
enum EvinigStatus evinig_model_new(const struct EvinigModelConfig *config,
                                   uint64_t seed,
                                   struct EvinigModel **out);

/**
 * Loads a model file. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be null or a NUL-terminated string; `out` must be null or
 * writable.
 */
enum EvinigStatus evinig_model_load(const char *path, struct EvinigModel **out);

/**
 * # Safety
 * `model` must be null or a live handle; `path` must be null or a
 * NUL-terminated string.
 */
enum EvinigStatus evinig_model_save(const struct EvinigModel *model, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void evinig_model_free(struct EvinigModel *model);

/**
 * Number of learnable scalars, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t evinig_model_num_parameters(const struct EvinigModel *model);

/**
 * # Safety
 * `model` must be null or a live handle; `out` must be null or writable.
 */
enum EvinigStatus evinig_model_config(const struct EvinigModel *model,
                                      struct EvinigModelConfig *out);

/**
 * Predicts the image at time `t` from scans `i0` (at `t0`) and `i1` (at
 * `t1`). `out_image` receives the prediction; `out_d`, `out_al` and
 * `out_ep` receive the change and uncertainty maps and may be null.
 * Every buffer holds `height * width` doubles.
 *
 * # Safety
 * Non-null buffers must be valid for `height * width` doubles and the
 * output buffers must not overlap the inputs.
 */
enum EvinigStatus evinig_predict(const struct EvinigModel *model,
                                 const double *i0,
                                 const double *i1,
                                 size_t height,
                                 size_t width,
                                 double t0,
                                 double t1,
                                 double t,
                                 double *out_image,
                                 double *out_d,
                                 double *out_al,
                                 double *out_ep);

/**
 * # Safety
 * `a` and `b` must be valid for `height * width` doubles; `out` writable.
 */
enum EvinigStatus evinig_mse(const double *a,
                             const double *b,
                             size_t height,
                             size_t width,
                             double *out);

/**
 * # Safety
 * `a` and `b` must be valid for `height * width` doubles; `out` writable.
 */
enum EvinigStatus evinig_psnr(const double *a,
                              const double *b,
                              size_t height,
                              size_t width,
                              double *out);

/**
 * # Safety
 * `a` and `b` must be valid for `height * width` doubles; `out` writable.
 */
enum EvinigStatus evinig_ssim(const double *a,
                              const double *b,
                              size_t height,
                              size_t width,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EVINIG_H */
