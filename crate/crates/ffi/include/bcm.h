#ifndef BCM_H
#define BCM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BcmStatus {
  BCM_STATUS_OK = 0,
  BCM_STATUS_NULL_POINTER = 1,
  BCM_STATUS_INVALID_INPUT = 2,
  BCM_STATUS_NOT_POSITIVE_DEFINITE = 3,
  BCM_STATUS_DIMENSION_MISMATCH = 4,
  BCM_STATUS_NON_CONVERGENCE = 5,
  BCM_STATUS_CONFIG = 6,
  BCM_STATUS_IO = 7,
  BCM_STATUS_PARSE = 8,
  BCM_STATUS_PANIC = 9,
} BcmStatus;

/*
 Gram matrix of displacement inner products.
 */
typedef struct BcmGram BcmGram;

/*
 Weighted point cloud.
 */
typedef struct BcmPointCloud BcmPointCloud;

/*
 Symmetric positive definite matrix.
 */
typedef struct BcmSpd BcmSpd;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *bcm_version(void);

/*
 Copies the last error message of this thread into `buf` (truncated and
 NUL-terminated) and returns the full message length, or 0 if the last
 call succeeded.

 # Safety
 `buf` must be null or point to `len` writable bytes.
 */
size_t bcm_last_error_message(char *buf, size_t len);

/*
 # Safety
 `data` must point to `dim * dim` doubles; `out` must be writable.
 */
enum BcmStatus bcm_spd_new(size_t dim, const double *data, struct BcmSpd **out);

/*
 # Safety
 `spd` must be null or a handle from `bcm_spd_new` not yet freed.
 */
void bcm_spd_free(struct BcmSpd *spd);

/*
 # Safety
 `spd` must be a live handle.
 */
size_t bcm_spd_dim(const struct BcmSpd *spd);

/*
 Copies the matrix into `data` (`dim * dim` doubles).

 # Safety
 `spd` must be a live handle and `data` writable for `dim * dim` doubles.
 */
enum BcmStatus bcm_spd_get(const struct BcmSpd *spd, double *data);

/*
 # Safety
 `data` must point to `p * p` doubles; `out` must be writable.
 */
enum BcmStatus bcm_gram_new(size_t p, const double *data, struct BcmGram **out);

/*
 # Safety
 `gram` must be null or a live handle.
 */
void bcm_gram_free(struct BcmGram *gram);

/*
 # Safety
 `gram` must be a live handle.
 */
size_t bcm_gram_dim(const struct BcmGram *gram);

/*
 # Safety
 `gram` must be a live handle and `data` writable for `p * p` doubles.
 */
enum BcmStatus bcm_gram_get(const struct BcmGram *gram, double *data);

/*
 Closed-form Gram matrix for centered Gaussians.

 # Safety
 `query` and the `p` entries of `refs` must be live handles.
 */
enum BcmStatus bcm_gram_gaussian(const struct BcmSpd *query,
                                 const struct BcmSpd *const *refs,
                                 size_t p,
                                 struct BcmGram **out);

/*
 Minimizes `λᵀAλ` over the simplex. A `tol` or `max_iters` of zero
 selects the default. `lambda` receives `p` doubles; `value` may be null.

 # Safety
 `gram` must be a live handle and `lambda` writable for `p` doubles.
 */
enum BcmStatus bcm_solve_simplex_qp(const struct BcmGram *gram,
                                    double tol,
                                    size_t max_iters,
                                    double *lambda,
                                    double *value);

/*
 Euclidean projection of `v` onto the simplex, written to `out`.

 # Safety
 `v` readable and `out` writable for `len` doubles.
 */
enum BcmStatus bcm_project_simplex(const double *v, size_t len, double *out);

/*
 Point cloud of `n` points in `R^dim`. A null `weights` means uniform.

 # Safety
 `points` readable for `n * dim` doubles, `weights` null or readable for
 `n` doubles, `out` writable.
 */
enum BcmStatus bcm_point_cloud_new(size_t n,
                                   size_t dim,
                                   const double *points,
                                   const double *weights,
                                   struct BcmPointCloud **out);

/*
 # Safety
 `cloud` must be null or a live handle.
 */
void bcm_point_cloud_free(struct BcmPointCloud *cloud);

/*
 Coordinates of `query` against `p` references by entropic transport.
 `lambda` receives `p` doubles; `gram` may be null.

 # Safety
 All handles live; `lambda` writable for `p` doubles.
 */
enum BcmStatus bcm_estimate_point_clouds(const struct BcmPointCloud *query,
                                         const struct BcmPointCloud *const *refs,
                                         size_t p,
                                         double epsilon,
                                         double *lambda,
                                         struct BcmGram **gram);

/*
 Barycenter of centered Gaussians with weights `lambda`.

 # Safety
 `lambda` readable for `p` doubles, `refs` holds `p` live handles, `out`
 writable.
 */
enum BcmStatus bcm_gaussian_barycenter(const double *lambda,
                                       const struct BcmSpd *const *refs,
                                       size_t p,
                                       double tol,
                                       size_t max_iters,
                                       struct BcmSpd **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BCM_H */
