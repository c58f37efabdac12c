#ifndef ORTHOSYNTH_H
#define ORTHOSYNTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum OsynStatus {
  OSYN_STATUS_OK = 0,
  OSYN_STATUS_NULL_POINTER = 1,
  OSYN_STATUS_INVALID_ARGUMENT = 2,
  OSYN_STATUS_VOLUME = 3,
  OSYN_STATUS_NUMERIC = 4,
  OSYN_STATUS_CONFIG = 5,
  OSYN_STATUS_DATA = 6,
  OSYN_STATUS_FORMAT = 7,
  OSYN_STATUS_IO = 8,
  OSYN_STATUS_PANIC = 9,
} OsynStatus;

typedef enum OsynOrientation {
  OSYN_ORIENTATION_AXIAL = 0,
  OSYN_ORIENTATION_CORONAL = 1,
  OSYN_ORIENTATION_SAGITTAL = 2,
} OsynOrientation;

/**
 * Opaque handle to a loaded pipeline checkpoint.
 */
typedef struct OsynPipeline OsynPipeline;

/**
 * Opaque volume handle.
 */
typedef struct OsynVolume OsynVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or NULL.
 * The pointer stays valid until the next call into this library on the same thread.
 */
const char *osyn_last_error(void);

/**
 * Creates a `nz x ny x nx` volume. `data` may be NULL for zeros, otherwise it must
 * point to `nz*ny*nx` floats in z, y, x order.
 *
 * # Safety
 * `data` must be NULL or valid for `nz*ny*nx` reads; `out` must be a valid pointer.
 */
enum OsynStatus osyn_volume_new(size_t nz,
                                size_t ny,
                                size_t nx,
                                const float *data,
                                struct OsynVolume **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum OsynStatus osyn_volume_read(const char *path, struct OsynVolume **out);

/**
 * Writes the volume as OVOL without a sidecar.
 *
 * # Safety
 * `v` must come from this library; `path` must be a NUL-terminated string.
 */
enum OsynStatus osyn_volume_write(const struct OsynVolume *v, const char *path);

/**
 * # Safety
 * `v` must be NULL or a handle from this library that has not been freed.
 */
void osyn_volume_free(struct OsynVolume *v);

/**
 * # Safety
 * `v` must be a live handle; the output pointers must be valid.
 */
enum OsynStatus osyn_volume_dims(const struct OsynVolume *v, size_t *nz, size_t *ny, size_t *nx);

/**
 * Borrowed pointer to the voxel data, valid while `v` lives. NULL if `v` is NULL.
 *
 * # Safety
 * `v` must be NULL or a live handle.
 */
const float *osyn_volume_data(const struct OsynVolume *v);

/**
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum OsynStatus osyn_pipeline_load(const char *dir, struct OsynPipeline **out);

/**
 * # Safety
 * `p` must be NULL or a live pipeline handle.
 */
void osyn_pipeline_free(struct OsynPipeline *p);

/**
 * Runs every stage on the PD/T2 pair and returns the final T1 volume.
 *
 * # Safety
 * All handles must be live; `out` must be a valid pointer.
 */
enum OsynStatus osyn_pipeline_run(const struct OsynPipeline *p,
                                  const struct OsynVolume *pd,
                                  const struct OsynVolume *t2,
                                  struct OsynVolume **out);

/**
 * # Safety
 * Both handles must be live; `out` must be a valid pointer.
 */
enum OsynStatus osyn_psnr(const struct OsynVolume *reference,
                          const struct OsynVolume *syn,
                          double max_val,
                          double *out);

/**
 * # Safety
 * `v` must be live; `out` must be a valid pointer.
 */
enum OsynStatus osyn_discontinuity_index(const struct OsynVolume *v,
                                         enum OsynOrientation orientation,
                                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ORTHOSYNTH_H */
