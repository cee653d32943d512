#ifndef EMODO_H
#define EMODO_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EmodoStatus {
  EMODO_STATUS_OK = 0,
  EMODO_STATUS_NULL_POINTER = 1,
  EMODO_STATUS_INVALID_ARGUMENT = 2,
  EMODO_STATUS_IO = 3,
  EMODO_STATUS_MALFORMED_INPUT = 4,
  EMODO_STATUS_REGISTRATION_FAILED = 5,
  EMODO_STATUS_PANIC = 6,
} EmodoStatus;

typedef enum EmodoFrameStatus {
  EMODO_FRAME_STATUS_BOOTSTRAP = 0,
  EMODO_FRAME_STATUS_PROPRIOCEPTIVE_ONLY = 1,
  EMODO_FRAME_STATUS_FUSED = 2,
  EMODO_FRAME_STATUS_REGISTRATION_FAILED = 3,
  EMODO_FRAME_STATUS_GATE_REJECTED = 4,
  EMODO_FRAME_STATUS_EMPTY_CLOUD = 5,
} EmodoFrameStatus;

/**
 * Opaque elevation grid.
 */
typedef struct EmodoGrid EmodoGrid;

/**
 * Opaque pipeline: filter state plus its rolling grid.
 */
typedef struct EmodoPipeline EmodoPipeline;

typedef struct EmodoPose {
  /**
   * Row-major rotation matrix.
   */
  double rotation[9];
  double translation[3];
} EmodoPose;

/**
 * Outcome of a registration.
 */
typedef struct EmodoRegistration {
  /**
   * World-frame correction; the registered pose is `correction * prior`.
   */
  struct EmodoPose correction;
  /**
   * Row-major 6×6 covariance of the correction, rotation first.
   */
  double covariance[36];
  uint32_t iterations;
  bool converged;
  uint32_t correspondences;
} EmodoRegistration;

/**
 * One odometry increment, expressed in the body frame at the start of the interval.
 */
typedef struct EmodoIncrement {
  double timestamp;
  double dt;
  /**
   * Row-major relative rotation.
   */
  double rotation[9];
  double translation[3];
  /**
   * Row-major 6×6 noise covariance, rotation first; all zeros selects the configured default.
   */
  double noise[36];
} EmodoIncrement;

typedef struct EmodoFrameResult {
  enum EmodoFrameStatus status;
  /**
   * Body pose after the frame.
   */
  struct EmodoPose body_pose;
  /**
   * Normalized innovation squared, or NaN when no correction was attempted.
   */
  double nis;
} EmodoFrameResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buffer` (NUL-terminated,
 * truncated to `capacity`). Returns the full message length in bytes, 0 when none.
 */
size_t emodo_last_error(char *buffer, size_t capacity);

/**
 * Creates an empty grid whose cell (0, 0) has its lower corner at `(origin_x, origin_y)`.
 */
enum EmodoStatus emodo_grid_new(double resolution,
                                uint32_t side_cells,
                                double origin_x,
                                double origin_y,
                                struct EmodoGrid **out);

void emodo_grid_free(struct EmodoGrid *grid);

/**
 * Fuses world-frame points with per-point vertical variances into the grid, using the
 * variance inflation rate `lambda`. Points outside the grid are skipped.
 */
enum EmodoStatus emodo_grid_integrate(struct EmodoGrid *grid,
                                      const double *xyz,
                                      const double *variances,
                                      size_t count,
                                      double lambda);

/**
 * Reads one cell. `occupied` is set to false for empty cells, in which case `height` and
 * `variance` are left untouched.
 */
enum EmodoStatus emodo_grid_cell(const struct EmodoGrid *grid,
                                 uint32_t ix,
                                 uint32_t iy,
                                 bool *occupied,
                                 double *height,
                                 double *variance);

enum EmodoStatus emodo_grid_occupied_count(const struct EmodoGrid *grid, size_t *out);

/**
 * Writes a binary snapshot of the grid to `path`.
 */
enum EmodoStatus emodo_grid_write_snapshot(const struct EmodoGrid *grid, const char *path);

/**
 * Loads a grid from a binary snapshot.
 */
enum EmodoStatus emodo_grid_read_snapshot(const char *path, struct EmodoGrid **out);

/**
 * Registers a camera-frame cloud against the grid starting from `prior_camera_pose`,
 * with default registration settings. Returns `RegistrationFailed` when no estimate was
 * produced; `out` is then left untouched.
 */
enum EmodoStatus emodo_register(const struct EmodoGrid *grid,
                                const double *xyz,
                                size_t count,
                                const struct EmodoPose *prior_camera_pose,
                                struct EmodoRegistration *out);

/**
 * Creates a pipeline. `config_toml` may be null for defaults; otherwise it holds the
 * pipeline settings in TOML.
 */
enum EmodoStatus emodo_pipeline_new(const char *config_toml,
                                    const struct EmodoPose *extrinsics,
                                    const struct EmodoPose *initial_body_pose,
                                    double initial_timestamp,
                                    struct EmodoPipeline **out);

void emodo_pipeline_free(struct EmodoPipeline *pipeline);

/**
 * Propagates the filter through one odometry increment.
 */
enum EmodoStatus emodo_pipeline_predict(struct EmodoPipeline *pipeline,
                                        const struct EmodoIncrement *increment);

/**
 * Registers, corrects and integrates one camera-frame cloud.
 */
enum EmodoStatus emodo_pipeline_process_frame(struct EmodoPipeline *pipeline,
                                              double timestamp,
                                              const double *xyz,
                                              size_t count,
                                              struct EmodoFrameResult *out);

/**
 * Current body pose estimate.
 */
enum EmodoStatus emodo_pipeline_pose(const struct EmodoPipeline *pipeline, struct EmodoPose *out);

/**
 * Copies the pipeline's current grid into a new, independently owned grid handle.
 */
enum EmodoStatus emodo_pipeline_copy_grid(const struct EmodoPipeline *pipeline,
                                          struct EmodoGrid **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EMODO_H */
