#ifndef SOFTGRASP_H
#define SOFTGRASP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SgStatus {
  SG_STATUS_OK = 0,
  SG_STATUS_NULL_POINTER = 1,
  SG_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A smoother was queried before it produced an estimate.
   */
  SG_STATUS_NOT_READY = 3,
  /**
   * Singular systems, missing consensus, divergence, non-convergence.
   */
  SG_STATUS_NUMERICAL = 4,
  SG_STATUS_PANIC = 5,
} SgStatus;

/**
 * Opaque fixed-lag smoother.
 */
typedef struct SgSmoother SgSmoother;

/**
 * Opaque minimum-snap trajectory.
 */
typedef struct SgTrajectory SgTrajectory;

typedef struct SgVec3 {
  double x;
  double y;
  double z;
} SgVec3;

typedef struct SgBoundaryConditions {
  struct SgVec3 x0;
  struct SgVec3 xg;
  struct SgVec3 vg;
  struct SgVec3 xf;
  double tg;
  double tf;
} SgBoundaryConditions;

typedef struct SgSetpoint {
  struct SgVec3 position;
  struct SgVec3 velocity;
  struct SgVec3 acceleration;
} SgSetpoint;

/**
 * Rigid transform. `rotation` is row-major.
 */
typedef struct SgPose {
  double rotation[9];
  struct SgVec3 translation;
} SgPose;

typedef struct SgTwist {
  struct SgVec3 linear;
  struct SgVec3 angular;
} SgTwist;

typedef struct SgRegistration {
  double rotation[9];
  struct SgVec3 translation;
  double cost;
  size_t inlier_count;
  bool converged;
} SgRegistration;

typedef struct SgGripperDims {
  double delta1;
  double delta2;
  double delta3;
} SgGripperDims;

typedef struct SgAxes {
  double longitudinal;
  double lateral;
  double vertical;
} SgAxes;

/**
 * Grasp outcome of a simulated scenario. Error fields are zero when
 * `grasped` is false.
 */
typedef struct SgGraspSummary {
  bool grasped;
  double t;
  double speed;
  struct SgAxes tracking_error;
  struct SgAxes true_error;
} SgGraspSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or NULL. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sg_last_error_message(void);

/**
 * Plans a minimum-snap trajectory. On success `*out` owns a new handle.
 *
 * # Safety
 * `bc` must point to a valid struct and `out` to writable storage.
 */
enum SgStatus sg_trajectory_plan(const struct SgBoundaryConditions *bc, struct SgTrajectory **out);

/**
 * Position, velocity and acceleration at time `t`.
 *
 * # Safety
 * `traj` must come from [`sg_trajectory_plan`]; `out` must be writable.
 */
enum SgStatus sg_trajectory_eval(const struct SgTrajectory *traj, double t, struct SgSetpoint *out);

/**
 * Integrated squared snap over the whole trajectory.
 *
 * # Safety
 * `traj` must come from [`sg_trajectory_plan`]; `out` must be writable.
 */
enum SgStatus sg_trajectory_snap_cost(const struct SgTrajectory *traj, double *out);

/**
 * # Safety
 * `traj` must be NULL or come from [`sg_trajectory_plan`], and must not be
 * used afterwards.
 */
void sg_trajectory_free(struct SgTrajectory *traj);

/**
 * Creates a smoother. `config_json` may be NULL for the default
 * configuration, or a JSON object overriding any of its fields.
 *
 * # Safety
 * `config_json` must be NULL or a NUL-terminated string; `out` writable.
 */
enum SgStatus sg_smoother_new(const char *config_json, struct SgSmoother **out);

/**
 * Adds a target pose measurement. Stamps must increase.
 *
 * # Safety
 * `sm` must come from [`sg_smoother_new`]; `pose` must be valid.
 */
enum SgStatus sg_smoother_push(struct SgSmoother *sm, const struct SgPose *pose, double stamp);

/**
 * Re-solves the window. `iterations` may be NULL.
 *
 * # Safety
 * `sm` must come from [`sg_smoother_new`].
 */
enum SgStatus sg_smoother_solve(struct SgSmoother *sm, size_t *iterations);

/**
 * Newest pose and body-frame twist of the last solve.
 *
 * # Safety
 * `sm` must come from [`sg_smoother_new`]; outputs must be writable.
 */
enum SgStatus sg_smoother_latest(const struct SgSmoother *sm,
                                 struct SgPose *pose,
                                 struct SgTwist *twist);

/**
 * # Safety
 * `sm` must be NULL or come from [`sg_smoother_new`], and must not be used
 * afterwards.
 */
void sg_smoother_free(struct SgSmoother *sm);

/**
 * Robust registration of `n` paired points given as `n * 3` packed
 * coordinates. Finds `R, t` with `model ≈ R * observed + t`. When
 * `inlier_mask` is not NULL it receives `n` flags.
 *
 * # Safety
 * `model` and `observed` must hold `3 * n` doubles, `inlier_mask` NULL or
 * `n` writable bools, `out` writable.
 */
enum SgStatus sg_register(const double *model,
                          const double *observed,
                          size_t n,
                          double c_bar,
                          uint64_t seed,
                          struct SgRegistration *out,
                          bool *inlier_mask);

/**
 * Per-axis tolerable grasp-point errors. Negative entries mean the object
 * does not fit on that axis.
 *
 * # Safety
 * `gripper` must be valid; `out` writable.
 */
enum SgStatus sg_error_bounds(const struct SgGripperDims *gripper,
                              double ell1,
                              double ell2,
                              struct SgAxes *out);

/**
 * Runs a scenario given as JSON, in the same format as the CLI scenario
 * documents, and reports the grasp.
 *
 * # Safety
 * `scenario_json` must be a NUL-terminated string; `out` writable.
 */
enum SgStatus sg_simulate_json(const char *scenario_json, struct SgGraspSummary *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOFTGRASP_H */
