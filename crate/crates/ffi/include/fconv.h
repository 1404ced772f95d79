#ifndef FCONV_H
#define FCONV_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call. Library errors share the command-line exit codes.
 */
typedef enum FconvStatus {
  FCONV_STATUS_OK = 0,
  FCONV_STATUS_IO = 2,
  FCONV_STATUS_MALFORMED = 3,
  FCONV_STATUS_CONFIG = 4,
  FCONV_STATUS_SHAPE = 5,
  FCONV_STATUS_GENERATION = 6,
  FCONV_STATUS_CHECKPOINT = 7,
  FCONV_STATUS_INVALID = 8,
  FCONV_STATUS_NULL_POINTER = 9,
  FCONV_STATUS_UTF8 = 10,
  FCONV_STATUS_PANIC = 11,
  FCONV_STATUS_OUT_OF_RANGE = 12,
} FconvStatus;

/**
 * Resolved configuration.
 */
typedef struct FconvConfig FconvConfig;

/**
 * Detections of one frame, ordered by fused score.
 */
typedef struct FconvDetections FconvDetections;

/**
 * First-stage network, optional refinement network and their configuration.
 */
typedef struct FconvDetector FconvDetector;

/**
 * Points and proposals of one frame.
 */
typedef struct FconvScene FconvScene;

/**
 * An oriented box in the rectified camera frame: volumetric center, sizes
 * `(length, width, height)` and heading about the vertical axis.
 */
typedef struct FconvBox {
  double center[3];
  double sizes[3];
  double yaw;
} FconvBox;

/**
 * One detection; `category` indexes the configured category list.
 */
typedef struct FconvDetection {
  uint32_t category;
  struct FconvBox bbox;
  double score_3d;
  double score_2d;
  double score_fused;
} FconvDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len` bytes) and returns the full message length
 * plus one. `buf` may be null to query the length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t fconv_last_error(char *buf, size_t len);

/**
 * Creates a configuration from a named preset.
 *
 * # Safety
 * `preset` must be a NUL-terminated string; `out` must be writable.
 */
enum FconvStatus fconv_config_new(const char *preset, struct FconvConfig **out);

/**
 * Applies one `key = value` override.
 *
 * # Safety
 * `cfg` must come from [`fconv_config_new`]; `key` and `value` must be
 * NUL-terminated strings.
 */
enum FconvStatus fconv_config_set(struct FconvConfig *cfg, const char *key, const char *value);

/**
 * Applies every entry of a `key = value` config file; on failure the
 * configuration is left unchanged.
 *
 * # Safety
 * `cfg` must come from [`fconv_config_new`]; `path` must be a NUL-terminated string.
 */
enum FconvStatus fconv_config_load_file(struct FconvConfig *cfg, const char *path);

/**
 * Number of configured categories.
 *
 * # Safety
 * `cfg` must be null or come from [`fconv_config_new`].
 */
size_t fconv_config_category_count(const struct FconvConfig *cfg);

/**
 * # Safety
 * `cfg` must be null or come from [`fconv_config_new`] and not be used afterwards.
 */
void fconv_config_free(struct FconvConfig *cfg);

/**
 * Loads a detector. `refine_model` may be null to skip refinement. The
 * configuration is validated and copied; later changes to `cfg` do not
 * affect the detector.
 *
 * # Safety
 * `cfg` must come from [`fconv_config_new`]; paths must be NUL-terminated
 * strings (`refine_model` may be null); `out` must be writable.
 */
enum FconvStatus fconv_detector_new(const struct FconvConfig *cfg,
                                    const char *first_model,
                                    const char *refine_model,
                                    struct FconvDetector **out);

/**
 * # Safety
 * `det` must be null or come from [`fconv_detector_new`] and not be used afterwards.
 */
void fconv_detector_free(struct FconvDetector *det);

/**
 * Creates a scene from `count` points in the rectified camera frame
 * (`xyz` holds `3 * count` values) and the row-major 3x4 camera projection
 * matrix. `intensities` may be null or hold `count` values.
 *
 * # Safety
 * Pointers must be valid for the stated number of values; `frame_id` must
 * be a NUL-terminated string; `out` must be writable.
 */
enum FconvStatus fconv_scene_new(const char *frame_id,
                                 const double *xyz,
                                 const double *intensities,
                                 size_t count,
                                 const double *projection,
                                 struct FconvScene **out);

/**
 * Adds a 2D proposal `(u_min, v_min, u_max, v_max)` in pixels.
 *
 * # Safety
 * `scene` must come from [`fconv_scene_new`]; `category` must be a NUL-terminated string.
 */
enum FconvStatus fconv_scene_add_proposal(struct FconvScene *scene,
                                          const char *category,
                                          double u_min,
                                          double v_min,
                                          double u_max,
                                          double v_max,
                                          double score_2d);

/**
 * Number of proposals added so far.
 *
 * # Safety
 * `scene` must be null or come from [`fconv_scene_new`].
 */
size_t fconv_scene_proposal_count(const struct FconvScene *scene);

/**
 * # Safety
 * `scene` must be null or come from [`fconv_scene_new`] and not be used afterwards.
 */
void fconv_scene_free(struct FconvScene *scene);

/**
 * Runs the detector on every proposal of `scene`, refining when the
 * detector has a refinement network.
 *
 * # Safety
 * Handles must come from their constructors; `out` must be writable.
 */
enum FconvStatus fconv_detect(const struct FconvDetector *det,
                              const struct FconvScene *scene,
                              struct FconvDetections **out);

/**
 * # Safety
 * `dets` must be null or come from [`fconv_detect`].
 */
size_t fconv_detections_len(const struct FconvDetections *dets);

/**
 * Copies detection `index` into `out`.
 *
 * # Safety
 * `dets` must come from [`fconv_detect`]; `out` must be writable.
 */
enum FconvStatus fconv_detections_get(const struct FconvDetections *dets,
                                      size_t index,
                                      struct FconvDetection *out);

/**
 * # Safety
 * `dets` must be null or come from [`fconv_detect`] and not be used afterwards.
 */
void fconv_detections_free(struct FconvDetections *dets);

/**
 * 3D and bird's-eye-view IoU of two boxes.
 *
 * # Safety
 * All pointers must be valid; `iou_3d_out` and `iou_bev_out` may be null.
 */
enum FconvStatus fconv_box_iou(const struct FconvBox *a,
                               const struct FconvBox *b,
                               double *iou_3d_out,
                               double *iou_bev_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FCONV_H */
