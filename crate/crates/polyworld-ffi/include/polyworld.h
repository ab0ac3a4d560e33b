/* polyworld C API: polygonal building extraction. */

#ifndef POLYWORLD_H
#define POLYWORLD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Ignore refinement offsets (offset-off ablation).
#define PW_FLAG_NO_OFFSET 1

// Score with the clockwise head only.
#define PW_FLAG_SCORE_CLOCK_ONLY 2

// Score with the transposed counterclockwise head only.
#define PW_FLAG_SCORE_COUNT_ONLY 4

// Status codes returned by every fallible entry point.
typedef enum PwStatus {
  PW_OK = 0,
  PW_INVALID_ARGUMENT = 1,
  PW_IO_ERROR = 2,
  PW_RUNTIME_ERROR = 3,
} PwStatus;

// Opaque model handle.
typedef struct PwModel PwModel;

// Opaque polygon set handle: extracted rings, confidences, and the source
// image extent (for pixel-unit export).
typedef struct PwPolygonSet PwPolygonSet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version string; static storage, do not free.
const char *pw_version(void);

// Message for the most recent error on this thread. The pointer stays
// valid until the next failing call on the same thread; do not free.
const char *pw_last_error_message(void);

// Load a model from a checkpoint file produced by the trainer or
// `Model::save`. On success writes a handle to `out_model`.
//
// # Safety
// `path` must be a valid NUL-terminated string; `out_model` must be a
// valid pointer to writable storage.
enum PwStatus pw_model_load(const char *path, struct PwModel **out_model);

// Release a model handle. Passing NULL is a no-op.
//
// # Safety
// `model` must be a pointer from [`pw_model_load`], not yet freed.
void pw_model_free(struct PwModel *model);

// Extract polygons from an image.
//
// `image` points at `height * width * 3` doubles, interleaved RGB in
// row-major order, values in [0, 1]. `flags` is a bitwise OR of the
// `PW_FLAG_*` constants. On success writes a polygon set handle.
//
// # Safety
// `model`, `image`, and `out_polygons` must be valid pointers; the image
// buffer must hold at least `height * width * 3` doubles.
enum PwStatus pw_model_extract(const struct PwModel *model,
                               const double *image,
                               size_t height,
                               size_t width,
                               uint32_t flags,
                               struct PwPolygonSet **out_polygons);

// Number of polygons in the set (0 for NULL).
//
// # Safety
// `set` must be NULL or a live polygon set handle.
size_t pw_polygon_set_len(const struct PwPolygonSet *set);

// Vertex count of one polygon (0 when out of range).
//
// # Safety
// `set` must be NULL or a live polygon set handle.
size_t pw_polygon_vertex_count(const struct PwPolygonSet *set, size_t index);

// Confidence of one polygon (NaN when out of range).
//
// # Safety
// `set` must be NULL or a live polygon set handle.
double pw_polygon_confidence(const struct PwPolygonSet *set, size_t index);

// Copy one polygon's vertices as (x, y) pairs in pixel units.
//
// `capacity_pairs` is the number of (x, y) pairs `out_xy` can hold; the
// vertex count is written to `out_pairs`. Fails without writing when the
// capacity is too small.
//
// # Safety
// `set` must be a live handle; `out_xy` must hold `2 * capacity_pairs`
// doubles; `out_pairs` must be valid.
enum PwStatus pw_polygon_vertices(const struct PwPolygonSet *set,
                                  size_t index,
                                  double *out_xy,
                                  size_t capacity_pairs,
                                  size_t *out_pairs);

// Serialize the polygon set as GeoJSON (pixel units). The returned string
// must be released with [`pw_string_free`].
//
// # Safety
// `set` must be a live handle; `out_json` must be valid.
enum PwStatus pw_polygon_set_to_geojson(const struct PwPolygonSet *set, char **out_json);

// Release a polygon set handle. Passing NULL is a no-op.
//
// # Safety
// `set` must be a pointer from [`pw_model_extract`], not yet freed.
void pw_polygon_set_free(struct PwPolygonSet *set);

// Release a string returned by this library. Passing NULL is a no-op.
//
// # Safety
// `s` must be a pointer returned by [`pw_polygon_set_to_geojson`], not yet
// freed.
void pw_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POLYWORLD_H */
