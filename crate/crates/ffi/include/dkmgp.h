#ifndef DKMGP_H
#define DKMGP_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define DKMGP_FEATURE_DIM 9

#define DKMGP_STATE_DIM 7

#define DKMGP_TARGET_DIM 3

typedef enum DkmgpStatus {
  DKMGP_STATUS_OK = 0,
  DKMGP_STATUS_NULL_POINTER = 1,
  DKMGP_STATUS_INVALID_UTF8 = 2,
  DKMGP_STATUS_PANIC = 3,
  DKMGP_STATUS_GUARD_VIOLATION = 10,
  DKMGP_STATUS_PARSE_ERROR = 11,
  DKMGP_STATUS_SCHEMA_ERROR = 12,
  DKMGP_STATUS_NON_UNIFORM_SAMPLING = 13,
  DKMGP_STATUS_INSUFFICIENT_DATA = 14,
  DKMGP_STATUS_DIMENSION_MISMATCH = 15,
  DKMGP_STATUS_LENGTH_MISMATCH = 16,
  DKMGP_STATUS_CHOLESKY_FAILURE = 17,
  DKMGP_STATUS_NON_FINITE_LOSS = 18,
  DKMGP_STATUS_VERSION_MISMATCH = 19,
  DKMGP_STATUS_MISSING_HORIZON_MODEL = 20,
  DKMGP_STATUS_INVALID_ARGUMENT = 21,
  DKMGP_STATUS_CONFIG_ERROR = 22,
  DKMGP_STATUS_IO = 23,
} DkmgpStatus;

// Opaque set of residual models keyed by correction horizon.
typedef struct DkmgpModelSet DkmgpModelSet;

// Vehicle parameters in SI units; angles in radians.
typedef struct DkmgpVehicleParams {
  double m;
  double iz;
  double lf;
  double lr;
  double tw;
  double h_cog;
  double g;
  double bank_theta;
  double steering_ratio;
} DkmgpVehicleParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next failing call on the same thread.
const char *dkmgp_last_error_message(void);

// Library defaults for the vehicle parameters.
struct DkmgpVehicleParams dkmgp_vehicle_params_default(void);

// Creates an empty model set in `*out`.
//
// # Safety
// `out` must be a valid pointer to writable storage for one pointer.
enum DkmgpStatus dkmgp_model_set_new(struct DkmgpModelSet **out);

// Loads a JSON checkpoint and registers it under its training horizon,
// replacing any model already registered there. Writes the horizon to
// `horizon_out` when it is not null.
//
// # Safety
// `set` must come from [`dkmgp_model_set_new`]; `path` must be a
// NUL-terminated string.
enum DkmgpStatus dkmgp_model_set_load_checkpoint(struct DkmgpModelSet *set,
                                                 const char *path,
                                                 size_t *horizon_out);

// Number of registered horizons.
//
// # Safety
// `set` must be null or come from [`dkmgp_model_set_new`].
size_t dkmgp_model_set_len(const struct DkmgpModelSet *set);

// Releases a model set. Null is a no-op.
//
// # Safety
// `set` must be null or come from [`dkmgp_model_set_new`] and not be used
// afterwards.
void dkmgp_model_set_free(struct DkmgpModelSet *set);

// Residual mean and variance (physical units) of the horizon-`horizon`
// model at the raw input `d = (x, y, vx, vy, psi, delta, omega, ax, delta_dot)`.
//
// # Safety
// `d` must point to 9 doubles; `mean_out` and `var_out` to 3 writable
// doubles each (`var_out` may be null).
enum DkmgpStatus dkmgp_predict_residual(const struct DkmgpModelSet *set,
                                        size_t horizon,
                                        const double *d,
                                        double *mean_out,
                                        double *var_out);

// Corrected `m`-step rollout.
//
// `policy_n > 0` selects a fixed correction horizon; `policy_n == 0` selects
// the adaptive policy with default thresholds. `inputs` holds `m` pairs
// `(ax, delta_dot)`. `states_out` receives `(m + 1) * 7` doubles, starting
// with `state`; `corrected_out`, when not null, receives `m + 1` flags.
//
// # Safety
// All non-null pointers must reference buffers of the sizes above.
enum DkmgpStatus dkmgp_multistep_predict(const struct DkmgpModelSet *set,
                                         const double *state,
                                         const double *inputs,
                                         size_t m,
                                         size_t policy_n,
                                         const struct DkmgpVehicleParams *params,
                                         double dt,
                                         double *states_out,
                                         uint8_t *corrected_out);

// Driving-condition level (0 cruising .. 3 aggressive) under the default
// thresholds; `delta_w` is the steering-wheel angle in degrees.
//
// # Safety
// `level_out` must be a valid pointer.
enum DkmgpStatus dkmgp_classify_condition(double vx,
                                          double ax,
                                          double delta_w,
                                          uint32_t *level_out);

// Correction horizon for a condition level under the default thresholds.
//
// # Safety
// `horizon_out` must be a valid pointer.
enum DkmgpStatus dkmgp_ach_horizon(uint32_t level, size_t *horizon_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DKMGP_H */
