#ifndef WAVESPLAT_H
#define WAVESPLAT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum WsStatus {
  WS_STATUS_OK = 0,
  WS_STATUS_NULL_ARGUMENT = 1,
  WS_STATUS_INVALID_UTF8 = 2,
  WS_STATUS_IO = 3,
  WS_STATUS_FORMAT = 4,
  WS_STATUS_INVALID_INPUT = 5,
  WS_STATUS_SHAPE = 6,
  WS_STATUS_UNKNOWN_TRACK = 7,
  WS_STATUS_UNKNOWN_FRAME = 8,
  WS_STATUS_MISMATCH = 9,
  WS_STATUS_NON_FINITE = 10,
  WS_STATUS_CONFIG = 11,
  WS_STATUS_BUFFER_TOO_SMALL = 12,
  WS_STATUS_PANIC = 13,
} WsStatus;

/**
 * A loaded checkpoint: scene graph plus its metadata.
 */
typedef struct WsScene WsScene;

/**
 * Pinhole intrinsics in pixels, OpenCV convention.
 */
typedef struct WsCamera {
  uint32_t width;
  uint32_t height;
  double fx;
  double fy;
  double cx;
  double cy;
  double near;
  double far;
} WsCamera;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ws_version(void);

/**
 * Copies the calling thread's last error message into `buf` (truncated,
 * always NUL-terminated when `len > 0`) and returns the byte length the
 * full message needs including the terminator. Empty after a success.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t ws_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint file into a new handle stored in `*out`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum WsStatus ws_scene_load(const char *path, struct WsScene **out);

/**
 * Writes the scene and its metadata to a checkpoint file.
 *
 * # Safety
 * `scene` must come from [`ws_scene_load`]; `path` must be NUL-terminated.
 */
enum WsStatus ws_scene_save(const struct WsScene *scene, const char *path);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `scene` must be null or a live handle not used afterwards.
 */
void ws_scene_free(struct WsScene *scene);

/**
 * Number of object nodes, hidden ones included.
 *
 * # Safety
 * `scene` must be a live handle; `out` must be writable.
 */
enum WsStatus ws_scene_object_count(const struct WsScene *scene, size_t *out);

/**
 * Gaussians over every node.
 *
 * # Safety
 * `scene` must be a live handle; `out` must be writable.
 */
enum WsStatus ws_scene_gaussian_count(const struct WsScene *scene, size_t *out);

/**
 * Writes object track ids to `ids` in node order and their count to
 * `*len`. Returns `BufferTooSmall` (with `*len` set) if `cap` is short.
 *
 * # Safety
 * `ids` must be valid for `cap` writes (or null with `cap == 0`).
 */
enum WsStatus ws_scene_track_ids(const struct WsScene *scene,
                                 uint32_t *ids,
                                 size_t cap,
                                 size_t *len);

/**
 * Scene clock: seconds of the first and last frame.
 *
 * # Safety
 * `scene` must be a live handle; outputs must be writable.
 */
enum WsStatus ws_scene_time_range(const struct WsScene *scene, double *t_first, double *t_last);

/**
 * Applies a JSON edit script. `plane_normal` (3 values) may be null for
 * z-up; a normal inside the script wins. On failure the scene is unchanged.
 *
 * # Safety
 * `scene` must be a live handle; `script_json` NUL-terminated;
 * `plane_normal` null or valid for 3 reads.
 */
enum WsStatus ws_scene_apply_edits(struct WsScene *scene,
                                   const char *script_json,
                                   const double *plane_normal);

/**
 * Renders the scene at `seconds` (scene clock) from a row-major 4×4
 * camera-to-world matrix. `color` receives `width·height·3` row-major RGB
 * values; `depth` (optional) receives `width·height` expected depths, 0
 * where nothing was hit. `background` (optional) is an RGB triple.
 *
 * # Safety
 * `camera_to_world` must be valid for 16 reads, `color` for the colour
 * writes, `depth` null or valid for the depth writes, `background` null or
 * valid for 3 reads.
 */
enum WsStatus ws_scene_render(const struct WsScene *scene,
                              double seconds,
                              const double *camera_to_world,
                              const struct WsCamera *camera,
                              const double *background,
                              double *color,
                              double *depth);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WAVESPLAT_H */
