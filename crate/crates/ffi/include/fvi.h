#ifndef FVI_H
#define FVI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FviFamily {
  /**
   * Two-point rule evaluated at `(1 - alpha) q0 + alpha q1`.
   */
  FVI_FAMILY_ALPHA = 0,
  /**
   * Galerkin rule with Lobatto quadrature, 2 to 5 stages.
   */
  FVI_FAMILY_LOBATTO = 1,
} FviFamily;

typedef enum FviMode {
  /**
   * Newton in the doubled space.
   */
  FVI_MODE_FULL = 0,
  /**
   * Newton on the identities only.
   */
  FVI_MODE_RESTRICTED = 1,
} FviMode;

/**
 * Result code of every fallible call.
 */
typedef enum FviStatus {
  FVI_STATUS_OK = 0,
  FVI_STATUS_NULL_POINTER = 1,
  FVI_STATUS_INVALID_ARGUMENT = 2,
  FVI_STATUS_NUMERICAL_FAILURE = 3,
  FVI_STATUS_PANIC = 4,
} FviStatus;

/**
 * A forced mechanical system with its default initial data.
 */
typedef struct FviSystem FviSystem;

/**
 * A computed discrete trajectory.
 */
typedef struct FviTrajectory FviTrajectory;

/**
 * Integrator selection. `family` holds an [`FviFamily`] value and `mode`
 * an [`FviMode`] value. `alpha` is read for the alpha family, `stages`
 * for the Lobatto family.
 */
typedef struct FviMethod {
  uint32_t family;
  double alpha;
  uint32_t stages;
  uint32_t mode;
  double newton_tol;
  uint32_t max_iters;
} FviMethod;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Default method: implicit midpoint, full doubled solve, tolerance 1e-12.
 */
struct FviMethod fvi_method_default(void);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *fvi_last_error_message(void);

/**
 * Two coupled van der Pol oscillators.
 */
enum FviStatus fvi_system_van_der_pol(double eps,
                                      double rho,
                                      double lambda,
                                      struct FviSystem **out);

/**
 * `M q'' + D q' + K q = 0` with `n * n` row-major matrices.
 *
 * # Safety
 * Each matrix pointer must reference `n * n` readable doubles.
 */
enum FviStatus fvi_system_damped_linear(size_t n,
                                        const double *mass,
                                        const double *damping,
                                        const double *stiffness,
                                        struct FviSystem **out);

/**
 * # Safety
 * `sys` must come from a system constructor and not be freed twice.
 */
void fvi_system_free(struct FviSystem *sys);

/**
 * Configuration dimension, or 0 for a null handle.
 *
 * # Safety
 * `sys` must be null or a live handle.
 */
size_t fvi_system_dim(const struct FviSystem *sys);

/**
 * Forced Euler-Lagrange acceleration at `(q, v)`.
 *
 * # Safety
 * `q`, `v` and `out` must reference `n` doubles; `n` must equal the system dimension.
 */
enum FviStatus fvi_forced_acceleration(const struct FviSystem *sys,
                                       const double *q,
                                       const double *v,
                                       size_t n,
                                       double *out);

/**
 * Integrates `steps` steps of size `h` from `(q0, v0)`.
 *
 * # Safety
 * `q0` and `v0` must reference `n` doubles; `method` must be valid.
 */
enum FviStatus fvi_integrate(const struct FviSystem *sys,
                             const struct FviMethod *method,
                             const double *q0,
                             const double *v0,
                             size_t n,
                             size_t steps,
                             double h,
                             struct FviTrajectory **out);

/**
 * # Safety
 * `traj` must come from [`fvi_integrate`] and not be freed twice.
 */
void fvi_trajectory_free(struct FviTrajectory *traj);

/**
 * Number of stored states (steps + 1), or 0 for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t fvi_trajectory_len(const struct FviTrajectory *traj);

/**
 * # Safety
 * `traj` must be null or a live handle.
 */
size_t fvi_trajectory_dim(const struct FviTrajectory *traj);

/**
 * Time, position, momentum and energy of state `k`. Any of the output
 * pointers may be null to skip that quantity.
 *
 * # Safety
 * `q` and `p` must be null or reference `fvi_trajectory_dim` doubles.
 */
enum FviStatus fvi_trajectory_state(const struct FviTrajectory *traj,
                                    size_t k,
                                    double *t,
                                    double *q,
                                    double *p,
                                    double *energy);

/**
 * Largest `max |q - Q|` along the trajectory, or NaN for a null handle.
 *
 * # Safety
 * `traj` must be null or a live handle.
 */
double fvi_trajectory_max_identity_defect(const struct FviTrajectory *traj);

/**
 * Fitted log-log slope of the final-state error over a step ladder from
 * the system's default initial state. `r2` may be null.
 *
 * # Safety
 * `slope` must be writable; `r2` must be null or writable.
 */
enum FviStatus fvi_convergence_slope(const struct FviSystem *sys,
                                     const struct FviMethod *method,
                                     double h_max,
                                     double h_min,
                                     size_t points,
                                     double *slope,
                                     double *r2);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FVI_H */
