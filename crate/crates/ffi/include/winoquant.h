#ifndef WINOQUANT_H
#define WINOQUANT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WqConvMode {
  WQ_CONV_MODE_FP = 0,
  WQ_CONV_MODE_DIRECT_Q8 = 1,
  WQ_CONV_MODE_WINO_FP = 2,
  WQ_CONV_MODE_WINO_Q8 = 3,
} WqConvMode;

typedef enum WqMatrix {
  WQ_MATRIX_AT = 0,
  WQ_MATRIX_BT = 1,
  WQ_MATRIX_G = 2,
} WqMatrix;

typedef enum WqStatus {
  WQ_STATUS_OK = 0,
  WQ_STATUS_NULL_POINTER = 1,
  WQ_STATUS_INVALID_SHAPE = 2,
  WQ_STATUS_FORMAT = 3,
  WQ_STATUS_COMPUTE = 4,
  WQ_STATUS_SINGULAR_TRANSFORM = 5,
  WQ_STATUS_INVALID_SCALE = 6,
  WQ_STATUS_INVALID_SPEC = 7,
  WQ_STATUS_UNDEFINED_METRIC = 8,
  WQ_STATUS_INVALID_ARGUMENT = 9,
  WQ_STATUS_IO = 10,
  WQ_STATUS_PANIC = 11,
} WqStatus;

/*
 Opaque tensor handle.
 */
typedef struct WqTensor WqTensor;

/*
 Opaque transform handle.
 */
typedef struct WqTransform WqTransform;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failing call on this thread; empty if none. Valid
 until the next failing call on the same thread.
 */
const char *wq_last_error(void);

/*
 Tensor copied from `data` (`prod(dims)` floats), or zeros if `data` is null.

 # Safety
 `dims` must point to `rank` values; `data`, when non-null, to
 `prod(dims)` floats; `out` must be writable.
 */
enum WqStatus wq_tensor_new(const size_t *dims,
                            size_t rank,
                            const float *data,
                            struct WqTensor **out);

/*
 Seeded gaussian tensor.

 # Safety
 As [`wq_tensor_new`].
 */
enum WqStatus wq_tensor_random(const size_t *dims,
                               size_t rank,
                               double mean,
                               double std,
                               uint64_t seed,
                               struct WqTensor **out);

/*
 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WqStatus wq_tensor_load(const char *path_, struct WqTensor **out);

/*
 # Safety
 `t` must be a live handle; `path` a NUL-terminated string.
 */
enum WqStatus wq_tensor_save(const struct WqTensor *t, const char *path_);

/*
 Rank of `t`, 0 for null.

 # Safety
 `t` must be null or a live handle.
 */
size_t wq_tensor_rank(const struct WqTensor *t);

/*
 Element count of `t`, 0 for null.

 # Safety
 `t` must be null or a live handle.
 */
size_t wq_tensor_len(const struct WqTensor *t);

/*
 Copies up to `cap` extents into `out`.

 # Safety
 `t` must be a live handle and `out` must hold `cap` values.
 */
enum WqStatus wq_tensor_dims(const struct WqTensor *t, size_t *out, size_t cap);

/*
 Borrowed pointer to the row-major payload, null for a null handle.

 # Safety
 `t` must be null or a live handle; the pointer dies with the handle.
 */
const float *wq_tensor_data(const struct WqTensor *t);

/*
 # Safety
 `t` must be null or a handle not yet freed.
 */
void wq_tensor_free(struct WqTensor *t);

/*
 Standard transform for `tile` in {43, 63}.

 # Safety
 `out` must be writable.
 */
enum WqStatus wq_transform_standard(int tile, struct WqTransform **out);

/*
 Transform with custom `(s_b, s_g)`, each of length `n`.

 # Safety
 `s_b` and `s_g` must hold `n` doubles; `out` must be writable.
 */
enum WqStatus wq_transform_with_scales(int tile,
                                       const double *s_b,
                                       const double *s_g,
                                       size_t n,
                                       struct WqTransform **out);

/*
 Transform from a scales JSON file.

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WqStatus wq_transform_load_scales(const char *path_, struct WqTransform **out);

/*
 Copies one matrix row-major into `out` and writes its extents.

 # Safety
 `t` must be a live handle; `out` must hold `cap` doubles; `rows` and
 `cols` must be writable.
 */
enum WqStatus wq_transform_matrix(const struct WqTransform *t,
                                  enum WqMatrix which,
                                  double *out,
                                  size_t cap,
                                  size_t *rows,
                                  size_t *cols);

/*
 `max |s_a s_b s_g - 1|`, NaN for null.

 # Safety
 `t` must be null or a live handle.
 */
double wq_transform_residual(const struct WqTransform *t);

/*
 # Safety
 `t` must be null or a handle not yet freed.
 */
void wq_transform_free(struct WqTransform *t);

/*
 3x3 convolution of `x [N,C,H,W]` with `w [K,C,3,3]`. `t` is required for
 the Winograd modes and ignored otherwise. `weight_bits` is 8 or 4.

 # Safety
 Handles must be live (or `t` null for direct modes); `out` writable.
 */
enum WqStatus wq_conv(const struct WqTensor *x,
                      const struct WqTensor *w,
                      const struct WqTransform *t,
                      enum WqConvMode mode,
                      size_t padding,
                      size_t group_size,
                      int weight_bits,
                      struct WqTensor **out);

/*
 SQNR in dB of `test` against `reference`.

 # Safety
 Handles must be live; `out` writable.
 */
enum WqStatus wq_sqnr(const struct WqTensor *reference, const struct WqTensor *test, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WINOQUANT_H */
