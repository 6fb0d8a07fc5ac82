#ifndef CMFSEG_H
#define CMFSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CmfStatus {
  CMF_STATUS_OK = 0,
  // A required pointer argument was NULL.
  CMF_STATUS_NULL_POINTER = 1,
  // Inputs failed validation.
  CMF_STATUS_INVALID = 2,
  // Filesystem failure.
  CMF_STATUS_IO = 3,
  // Internal error; the library state is still usable.
  CMF_STATUS_PANIC = 4,
} CmfStatus;

// A fitted statistical shape model.
typedef struct CmfShapeModel CmfShapeModel;

// A 3D volume (probability map, intensity image or binary mask).
typedef struct CmfVolume CmfVolume;

// Solver and shape-coupling parameters; start from [`cmf_params_default`].
typedef struct CmfParams {
  double c;
  double gamma;
  uint32_t max_iters;
  double tol;
  double threshold;
  // Isotropic (Euclidean) flow bound instead of the componentwise one.
  bool euclidean;
  double alpha0;
  double eps;
  uint32_t outer_iters;
  double beta;
  double width;
  uint32_t pose_rounds;
} CmfParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *cmf_last_error(void);

// Library version as a static NUL-terminated string.
const char *cmf_version(void);

struct CmfParams cmf_params_default(void);

// Creates a volume from `len = dims[0]*dims[1]*dims[2]` samples, x fastest.
//
// # Safety
// `dims` and `spacing` point to 3 values each, `data` to `len` values, and
// `out` to writable storage for one handle.
enum CmfStatus cmf_volume_new(const size_t *dims,
                              const double *spacing,
                              const double *data,
                              size_t len,
                              struct CmfVolume **out);

// Reads a volume file (float or mask element type).
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum CmfStatus cmf_volume_load(const char *path, struct CmfVolume **out);

// Writes `vol` to `path` (plus its `.raw` payload), as a `UINT8` mask when
// `as_mask` is set.
//
// # Safety
// `vol` is a live handle; `path` is a NUL-terminated string.
enum CmfStatus cmf_volume_save(const struct CmfVolume *vol, const char *path, bool as_mask);

// Number of samples, 0 for NULL.
//
// # Safety
// `vol` is NULL or a live handle.
size_t cmf_volume_len(const struct CmfVolume *vol);

// # Safety
// `vol` is a live handle; `dims_out` points to 3 writable values.
enum CmfStatus cmf_volume_dims(const struct CmfVolume *vol, size_t *dims_out);

// Copies the samples into `buf`, which must hold exactly `len` values.
//
// # Safety
// `vol` is a live handle; `buf` points to `len` writable values.
enum CmfStatus cmf_volume_copy_data(const struct CmfVolume *vol, double *buf, size_t len);

// # Safety
// `vol` is NULL or a handle not yet freed.
void cmf_volume_free(struct CmfVolume *vol);

// Reads a shape model file.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum CmfStatus cmf_model_load(const char *path, struct CmfShapeModel **out);

// Number of retained modes, 0 for NULL.
//
// # Safety
// `model` is NULL or a live handle.
size_t cmf_model_rank(const struct CmfShapeModel *model);

// # Safety
// `model` is NULL or a handle not yet freed.
void cmf_model_free(struct CmfShapeModel *model);

// Segments a probability map. With `model` NULL this is the plain solve;
// otherwise the shape prior is coupled in. `params` NULL selects defaults.
//
// # Safety
// `prob` is a live handle, `model` and `params` are NULL or valid, and
// `mask_out` is writable.
enum CmfStatus cmf_segment(const struct CmfVolume *prob,
                           const struct CmfShapeModel *model,
                           const struct CmfParams *params,
                           struct CmfVolume **mask_out);

// Dice overlap of two binary masks on the same grid.
//
// # Safety
// `pred` and `gt` are live handles; `out` is writable.
enum CmfStatus cmf_dice(const struct CmfVolume *pred, const struct CmfVolume *gt, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMFSEG_H */
