/* C interface for the try-on pipeline (tryon-ffi crate).
 *
 * Kept in sync with src/lib.rs by hand; regenerate with cbindgen when
 * available:  cbindgen --crate tryon-ffi --output include/tryon.h
 */

#ifndef TRYON_H
#define TRYON_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* Status codes returned by every entry point. */
typedef enum TryonStatus {
  TRYON_OK = 0,
  TRYON_NULL_ARGUMENT = 1,
  TRYON_INVALID_ARGUMENT = 2,
  TRYON_IO_ERROR = 3,
  TRYON_BAD_CHECKPOINT = 4,
  TRYON_SHAPE_MISMATCH = 5,
  TRYON_INTERNAL_ERROR = 6,
} TryonStatus;

/* Opaque dataset handle. */
typedef struct TryonDataset TryonDataset;

/* Opaque pipeline handle: both stages plus an optional rejection gate. */
typedef struct TryonPipeline TryonPipeline;

/* Copy the last error message for the calling thread into `buf` (NUL
 * terminated, truncated to `cap`). Returns the full message length.
 * `buf` may be NULL to query the length. */
size_t tryon_last_error(char *buf, size_t cap);

/* Generate a deterministic synthetic dataset at the given condition and
 * output resolutions. */
TryonStatus tryon_synth_dataset_create(uint64_t seed,
                                       size_t n,
                                       size_t cond_h,
                                       size_t cond_w,
                                       size_t out_h,
                                       size_t out_w,
                                       double occlusion_prob,
                                       TryonDataset **out);

void tryon_dataset_free(TryonDataset *ds);

size_t tryon_dataset_len(const TryonDataset *ds);

/* Load both stage checkpoints plus an optional rejection calibration
 * (`calib_path` may be NULL to disable gating). */
TryonStatus tryon_pipeline_load(const char *tocg_path,
                                const char *toig_path,
                                const char *calib_path,
                                TryonPipeline **out);

void tryon_pipeline_free(TryonPipeline *p);

/* Output image height/width of the loaded pipeline. */
TryonStatus tryon_pipeline_output_size(const TryonPipeline *p, size_t *h, size_t *w);

/* Run the pipeline on `(person_idx, cloth_idx)` of a dataset. On success
 * `accepted` reports the gate decision; when accepted and `out_image` is
 * non-NULL, the RGB image in [-1,1] (length 3*h*w, channel-major) is written
 * there. `p_accept` (nullable) receives the acceptance probability when a
 * calibration is loaded, NaN otherwise. */
TryonStatus tryon_infer(const TryonPipeline *p,
                        const TryonDataset *ds,
                        size_t person_idx,
                        size_t cloth_idx,
                        float *out_image,
                        size_t out_len,
                        bool *accepted,
                        double *p_accept);

/* Windowed SSIM between two channel-major RGB buffers in [-1,1]. */
TryonStatus tryon_ssim(const float *a, const float *b, size_t h, size_t w, double *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* TRYON_H */
