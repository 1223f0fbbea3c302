/* C interface to the voxseg part-segmentation toolkit. */

#ifndef VOXSEG_H
#define VOXSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of one call. Anything other than `Ok` stores a message
 * retrievable through `voxseg_last_error`.
 */
typedef enum VoxsegStatus {
  VoxsegStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  VoxsegStatus_NullArgument = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  VoxsegStatus_InvalidUtf8 = 2,
  /**
   * Tensor or buffer extents do not line up.
   */
  VoxsegStatus_ShapeMismatch = 3,
  /**
   * A value lies outside the accepted domain.
   */
  VoxsegStatus_InvalidArgument = 4,
  /**
   * An architecture or schedule is inconsistent.
   */
  VoxsegStatus_InvalidConfig = 5,
  /**
   * Autodiff misuse inside the library.
   */
  VoxsegStatus_Autodiff = 6,
  /**
   * A serialized artifact does not follow its format.
   */
  VoxsegStatus_MalformedFile = 7,
  /**
   * Filesystem failure.
   */
  VoxsegStatus_Io = 8,
  /**
   * JSON failure.
   */
  VoxsegStatus_Json = 9,
  /**
   * The library panicked; the boundary absorbed it.
   */
  VoxsegStatus_Panic = 10,
} VoxsegStatus;

/**
 * A labeled point cloud.
 */
typedef struct VoxsegCloud VoxsegCloud;

/**
 * A voxel grid, possibly carrying per-voxel labels.
 */
typedef struct VoxsegGrid VoxsegGrid;

/**
 * A loaded network, in whichever precision its checkpoint stored.
 */
typedef struct VoxsegModel VoxsegModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Version of the linked library, as a static string.
 */
const char *voxseg_version(void);

/**
 * Copies the last error message into `buf` (NUL-terminated, truncated to
 * `cap` bytes) and returns the full message length in bytes. Passing a
 * null buffer or zero capacity just measures.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null.
 */
size_t voxseg_last_error(char *buf, size_t cap);

/**
 * Checks a dilation-rate schedule for gap-free kernel support. On success
 * writes whether the schedule is feasible; an infeasible schedule is not
 * an error.
 *
 * # Safety
 * `rates` must point to `count` readable values; `feasible` must be
 * writable.
 */
enum VoxsegStatus voxseg_validate_dilations(const size_t *rates,
                                            size_t count,
                                            size_t kernel,
                                            bool *feasible);

/**
 * Receptive-field side length of a built-in architecture variant.
 *
 * # Safety
 * `variant` must be a valid NUL-terminated string; `out` must be writable.
 */
enum VoxsegStatus voxseg_receptive_field(const char *variant, size_t *out);

/**
 * Loads a labeled cloud from a `x y z label` text file. The file stem
 * becomes the shape id.
 *
 * # Safety
 * `path` and `category` must be valid NUL-terminated strings; `out` must
 * be writable.
 */
enum VoxsegStatus voxseg_cloud_load(const char *path,
                                    const char *category,
                                    struct VoxsegCloud **out);

/**
 * Releases a cloud. Null is ignored.
 *
 * # Safety
 * `cloud` must have come from this library and not been freed before.
 */
void voxseg_cloud_free(struct VoxsegCloud *cloud);

/**
 * Number of points in the cloud.
 *
 * # Safety
 * `cloud` must be a live cloud handle; `out` must be writable.
 */
enum VoxsegStatus voxseg_cloud_point_count(const struct VoxsegCloud *cloud, size_t *out);

/**
 * Centers the cloud on its centroid and scales it into the unit ball,
 * in place.
 *
 * # Safety
 * `cloud` must be a live cloud handle.
 */
enum VoxsegStatus voxseg_cloud_normalize(struct VoxsegCloud *cloud);

/**
 * Quantizes a normalized cloud onto a cubic lattice with majority-vote
 * labels.
 *
 * # Safety
 * `cloud` must be a live cloud handle; `out` must be writable.
 */
enum VoxsegStatus voxseg_cloud_voxelize(const struct VoxsegCloud *cloud,
                                        size_t resolution,
                                        struct VoxsegGrid **out);

/**
 * Reads one label per cloud point out of a labeled grid. Points in
 * unoccupied voxels take the label of the nearest occupied voxel. `len`
 * must equal the cloud's point count.
 *
 * # Safety
 * `cloud` and `grid` must be live handles; `labels` must point to `len`
 * writable bytes.
 */
enum VoxsegStatus voxseg_cloud_project_labels(const struct VoxsegCloud *cloud,
                                              const struct VoxsegGrid *grid,
                                              uint8_t *labels,
                                              size_t len);

/**
 * Releases a grid. Null is ignored.
 *
 * # Safety
 * `grid` must have come from this library and not been freed before.
 */
void voxseg_grid_free(struct VoxsegGrid *grid);

/**
 * Side length of the grid.
 *
 * # Safety
 * `grid` must be a live grid handle; `out` must be writable.
 */
enum VoxsegStatus voxseg_grid_resolution(const struct VoxsegGrid *grid, size_t *out);

/**
 * Number of occupied voxels.
 *
 * # Safety
 * `grid` must be a live grid handle; `out` must be writable.
 */
enum VoxsegStatus voxseg_grid_occupied_count(const struct VoxsegGrid *grid, size_t *out);

/**
 * Copies the grid's per-voxel labels (zero marks empty space) into a
 * caller buffer of `len == resolution^3` bytes. Errors if the grid
 * carries no labels.
 *
 * # Safety
 * `grid` must be a live grid handle; `labels` must point to `len`
 * writable bytes.
 */
enum VoxsegStatus voxseg_grid_labels(const struct VoxsegGrid *grid, uint8_t *labels, size_t len);

/**
 * Reads a grid from a volume file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be writable.
 */
enum VoxsegStatus voxseg_grid_read(const char *path, struct VoxsegGrid **out);

/**
 * Writes a grid to a volume file.
 *
 * # Safety
 * `grid` must be a live grid handle; `path` must be a valid
 * NUL-terminated string.
 */
enum VoxsegStatus voxseg_grid_write(const struct VoxsegGrid *grid, const char *path);

/**
 * Loads a trained checkpoint, restoring the architecture and weights in
 * the precision they were saved with.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string; `out` must be writable.
 */
enum VoxsegStatus voxseg_model_load(const char *path, struct VoxsegModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must have come from this library and not been freed before.
 */
void voxseg_model_free(struct VoxsegModel *model);

/**
 * Grid side length the model was built for.
 *
 * # Safety
 * `model` must be a live model handle; `out` must be writable.
 */
enum VoxsegStatus voxseg_model_resolution(const struct VoxsegModel *model, size_t *out);

/**
 * Number of part labels the model predicts.
 *
 * # Safety
 * `model` must be a live model handle; `out` must be writable.
 */
enum VoxsegStatus voxseg_model_part_count(const struct VoxsegModel *model, size_t *out);

/**
 * Receptive-field side length of the model's dilation schedule.
 *
 * # Safety
 * `model` must be a live model handle; `out` must be writable.
 */
enum VoxsegStatus voxseg_model_receptive_field(const struct VoxsegModel *model, size_t *out);

/**
 * Segments an occupancy grid, producing a new grid whose labels mark every
 * occupied voxel with a predicted part (zero stays empty space).
 *
 * # Safety
 * `model` and `grid` must be live handles; `out` must be writable.
 */
enum VoxsegStatus voxseg_model_segment(struct VoxsegModel *model,
                                       const struct VoxsegGrid *grid,
                                       struct VoxsegGrid **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VOXSEG_H */
