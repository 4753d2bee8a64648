#ifndef LOWSPLAT_H
#define LOWSPLAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LsStatus {
  LS_STATUS_OK = 0,
  LS_STATUS_NULL_ARGUMENT = 1,
  LS_STATUS_INVALID_ARGUMENT = 2,
  LS_STATUS_INVALID_CONFIG = 3,
  LS_STATUS_MISSING_INPUT = 4,
  LS_STATUS_CORRUPT_INPUT = 5,
  LS_STATUS_DIMENSION_MISMATCH = 6,
  LS_STATUS_DEGENERATE_GEOMETRY = 7,
  LS_STATUS_IO = 8,
  LS_STATUS_PANIC = 9,
} LsStatus;

/**
 * Opaque adapter parameters.
 */
typedef struct LsAdapter LsAdapter;

/**
 * Opaque RGB image with f64 samples in [0, 1].
 */
typedef struct LsImage LsImage;

/**
 * Opaque Gaussian scene.
 */
typedef struct LsScene LsScene;

/**
 * Pinhole camera. `rotation` is camera-to-world, row-major; `center` is
 * the camera position in world coordinates.
 */
typedef struct LsCamera {
  double fx;
  double fy;
  double cx;
  double cy;
  double rotation[9];
  double center[3];
  uint32_t width;
  uint32_t height;
} LsCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ls_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ls_version(void);

/**
 * Creates an image from `width * height * 3` interleaved RGB samples.
 *
 * # Safety
 * `rgb` must point to `width * height * 3` readable doubles.
 */
enum LsStatus ls_image_new(uint32_t width,
                           uint32_t height,
                           const double *rgb,
                           struct LsImage **out_image);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_image` must be writable.
 */
enum LsStatus ls_image_load(const char *path, struct LsImage **out_image);

/**
 * Writes an 8-bit RGB PNG.
 *
 * # Safety
 * `image` must be a live handle and `path` a NUL-terminated string.
 */
enum LsStatus ls_image_save(const struct LsImage *image, const char *path);

/**
 * # Safety
 * `image` must be a live handle; the size outputs must be writable.
 */
enum LsStatus ls_image_size(const struct LsImage *image, uint32_t *width, uint32_t *height);

/**
 * Copies the samples into `rgb`, which must hold `width * height * 3`.
 *
 * # Safety
 * `rgb` must point to `len` writable doubles.
 */
enum LsStatus ls_image_pixels(const struct LsImage *image, double *rgb, size_t len);

/**
 * # Safety
 * `image` must be null or a handle not yet freed.
 */
void ls_image_free(struct LsImage *image);

/**
 * PSNR in dB (capped for identical images) and SSIM of two same-sized images.
 *
 * # Safety
 * Handles must be live; outputs writable or null.
 */
enum LsStatus ls_image_metrics(const struct LsImage *a,
                               const struct LsImage *b,
                               double *out_psnr,
                               double *out_ssim);

/**
 * Applies the default lowlight degradation, drawn from the stream
 * (`seed`, `scene_id`, `view_id`).
 *
 * # Safety
 * `image` must be live, `scene_id` NUL-terminated, `out_image` writable.
 */
enum LsStatus ls_degrade(const struct LsImage *image,
                         uint64_t seed,
                         const char *scene_id,
                         uint64_t view_id,
                         struct LsImage **out_image);

/**
 * # Safety
 * `path` must be NUL-terminated; `out_scene` writable.
 */
enum LsStatus ls_scene_read(const char *path, struct LsScene **out_scene);

/**
 * # Safety
 * `scene` must be live and `path` NUL-terminated.
 */
enum LsStatus ls_scene_write(const struct LsScene *scene, const char *path);

/**
 * Number of primitives, or 0 for a null handle.
 *
 * # Safety
 * `scene` must be null or live.
 */
size_t ls_scene_len(const struct LsScene *scene);

/**
 * # Safety
 * `scene` must be null or a handle not yet freed.
 */
void ls_scene_free(struct LsScene *scene);

/**
 * Renders `scene` from `camera` over a constant `background` color.
 *
 * # Safety
 * Pointers must be live; `background` points to 3 doubles.
 */
enum LsStatus ls_render(const struct LsScene *scene,
                        const struct LsCamera *camera,
                        const double *background,
                        struct LsImage **out_image);

/**
 * # Safety
 * `path` must be NUL-terminated; `out_adapter` writable.
 */
enum LsStatus ls_adapter_read(const char *path, struct LsAdapter **out_adapter);

/**
 * # Safety
 * Handles must be live; `out_image` writable.
 */
enum LsStatus ls_adapter_apply(const struct LsAdapter *adapter,
                               const struct LsImage *image,
                               struct LsImage **out_image);

/**
 * # Safety
 * `adapter` must be null or a handle not yet freed.
 */
void ls_adapter_free(struct LsAdapter *adapter);

/**
 * Two-view reconstruction. `adapter` may be null (no enhancement);
 * `config_toml` may be null (defaults) or a run configuration whose
 * `[pipeline]` table is used.
 *
 * # Safety
 * Non-null pointers must be live; `config_toml` NUL-terminated.
 */
enum LsStatus ls_reconstruct(const struct LsImage *image0,
                             const struct LsCamera *camera0,
                             const struct LsImage *image1,
                             const struct LsCamera *camera1,
                             const struct LsAdapter *adapter,
                             const char *config_toml,
                             struct LsScene **out_scene);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOWSPLAT_H */
