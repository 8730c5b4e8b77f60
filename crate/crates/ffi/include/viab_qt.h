#ifndef VIAB_QT_H
#define VIAB_QT_H

#include <stddef.h>
#include <stdint.h>

typedef enum VqStatus {
  VQ_STATUS_OK = 0,
  VQ_STATUS_NULL_POINTER = 1,
  VQ_STATUS_INVALID_ARGUMENT = 2,
  VQ_STATUS_CONFIG = 3,
  VQ_STATUS_IO = 4,
  VQ_STATUS_OUTSIDE_DOMAIN = 5,
  VQ_STATUS_NUMERICAL = 6,
  VQ_STATUS_QUASI_TANGENCY_VIOLATED = 7,
  VQ_STATUS_REPLAY_MISMATCH = 8,
  VQ_STATUS_PANIC = 9,
} VqStatus;

// Parsed experiment configuration.
typedef struct VqConfig VqConfig;

// Closed constraint set.
typedef struct VqConstraint VqConstraint;

// Coefficient model bound to a space.
typedef struct VqModel VqModel;

// Truncated state space.
typedef struct VqSpace VqSpace;

// Residual of one control at one step size.
typedef struct VqResidual {
  double term_gap;
  double term_cond;
  double total;
  double std_err;
  // Nonzero if some projection failed to converge.
  int flagged;
} VqResidual;

// Boundary conditions at one point.
typedef struct VqNagumo {
  double lhs_dn1;
  double dn2_norm;
  double dn2_tol;
  int pass_dn1;
  int pass_dn2;
} VqNagumo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *vq_last_error(void);

// Library version as a static NUL-terminated string.
const char *vq_version(void);

// `(e^z - 1)/z`, continuous at zero.
double vq_phi1(double z);

// # Safety
// `mu` must point to `n` doubles; `out` must be writable.
enum VqStatus vq_space_new(const double *mu,
                           size_t n,
                           size_t noise_dim,
                           size_t control_dim,
                           struct VqSpace **out);

// # Safety
// `space` must come from this library or be null.
void vq_space_free(struct VqSpace *space);

// # Safety
// `space` must be a live handle.
size_t vq_space_dim(const struct VqSpace *space);

// `out = S(t) x`. Both buffers have length `n`.
//
// # Safety
// Buffers must hold `n` doubles.
enum VqStatus vq_space_semigroup_apply(const struct VqSpace *space,
                                       double t,
                                       const double *x,
                                       double *out);

// `out = ∫₀ʰ S(r) v dr`.
//
// # Safety
// Buffers must hold `n` doubles.
enum VqStatus vq_space_drift_convolution(const struct VqSpace *space,
                                         double h,
                                         const double *v,
                                         double *out);

// Covariance of `∫₀ʰ S(h-s) g dW_s`. `g` is `n×m`, `out` is `n×n`.
//
// # Safety
// `g` must hold `n*m` doubles and `out` `n*n`.
enum VqStatus vq_space_noise_covariance(const struct VqSpace *space,
                                        double h,
                                        const double *g,
                                        double *out);

// Registry family with scalar parameters:
// `zero` (none), `radial-restoring` and `tangential-rotation`
// (`kappa, sigma`), `clipped-polynomial` (`linear, cubic, radius, sigma`).
// `c <= 0` selects the natural constant of the family.
//
// # Safety
// `family` must be NUL-terminated; `params` must hold `nparams` doubles.
enum VqStatus vq_model_new(const struct VqSpace *space,
                           const char *family,
                           const double *params,
                           size_t nparams,
                           double c,
                           double gamma,
                           struct VqModel **out);

// Constant coefficients `f ≡ drift` (`n`), `g ≡ noise` (`n×m`).
//
// # Safety
// Buffers must hold `n` and `n*m` doubles.
enum VqStatus vq_model_new_constant(const struct VqSpace *space,
                                    const double *drift,
                                    const double *noise,
                                    double c,
                                    double gamma,
                                    struct VqModel **out);

// # Safety
// `model` must come from this library or be null.
void vq_model_free(struct VqModel *model);

// # Safety
// `center` must hold `n` doubles.
enum VqStatus vq_constraint_new_ball(const double *center,
                                     size_t n,
                                     double radius,
                                     struct VqConstraint **out);

// `{x : <normal, x> <= offset}`.
//
// # Safety
// `normal` must hold `n` doubles.
enum VqStatus vq_constraint_new_half_space(const double *normal,
                                           size_t n,
                                           double offset,
                                           struct VqConstraint **out);

// # Safety
// `k` must come from this library or be null.
void vq_constraint_free(struct VqConstraint *k);

// Nearest point of K to `x`; `distance` may be null.
//
// # Safety
// `x` and `out` must hold `dim(K)` doubles.
enum VqStatus vq_constraint_project(const struct VqConstraint *k,
                                    const double *x,
                                    double *out,
                                    double *distance);

// Residual of the constant control `u` at step `h` from `count` samples.
// `balanced != 0` selects the balanced correction.
//
// # Safety
// `xi` must hold `n` doubles and `u` `d` doubles.
enum VqStatus vq_residual(const struct VqSpace *space,
                          const struct VqModel *model,
                          const struct VqConstraint *k,
                          const double *xi,
                          const double *u,
                          double h,
                          double lambda,
                          size_t count,
                          uint64_t seed,
                          int balanced,
                          struct VqResidual *out);

// First/second-order boundary conditions at `x` on the unit sphere.
//
// # Safety
// `x` must hold `n` doubles and `u` `d` doubles.
enum VqStatus vq_nagumo_unit_ball(const struct VqSpace *space,
                                  const struct VqModel *model,
                                  const double *x,
                                  const double *u,
                                  struct VqNagumo *out);

// Parses and validates a TOML experiment configuration.
//
// # Safety
// `toml` must be NUL-terminated.
enum VqStatus vq_config_from_toml(const char *toml, struct VqConfig **out);

// # Safety
// `path` must be NUL-terminated.
enum VqStatus vq_config_from_file(const char *path, struct VqConfig **out);

// # Safety
// `config` must come from this library or be null.
void vq_config_free(struct VqConfig *config);

// # Safety
// `config` must be a live handle.
enum VqStatus vq_config_set_seed(struct VqConfig *config, uint64_t seed);

// Builds the space, model and constraint described by `config`. Any of
// the out pointers may be null to skip that object.
//
// # Safety
// `config` must be a live handle.
enum VqStatus vq_config_build(const struct VqConfig *config,
                              struct VqSpace **space,
                              struct VqModel **model,
                              struct VqConstraint **constraint);

// Runs the experiment and writes its artifacts to `out_dir`. `passed`
// receives the verdict (1 pass, 0 fail) and may be null.
//
// # Safety
// `config` must be a live handle and `out_dir` NUL-terminated.
enum VqStatus vq_config_run(const struct VqConfig *config, const char *out_dir, int *passed);

// Re-runs an artifact directory; fails with `ReplayMismatch` on any
// differing CSV byte.
//
// # Safety
// `dir` must be NUL-terminated.
enum VqStatus vq_replay(const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VIAB_QT_H */
