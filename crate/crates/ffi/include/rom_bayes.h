#ifndef ROM_BAYES_H
#define ROM_BAYES_H

/* Generated by cbindgen from rom-bayes-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible entry point.
 */
typedef enum {
  RB_STATUS_OK = 0,
  RB_STATUS_NULL_POINTER = 1,
  RB_STATUS_INVALID_ARGUMENT = 2,
  RB_STATUS_DIMENSION_MISMATCH = 3,
  RB_STATUS_DIVERGENCE = 4,
  RB_STATUS_RANK_DEFICIENT = 5,
  RB_STATUS_NUMERICAL_FAILURE = 6,
  RB_STATUS_IO = 7,
  RB_STATUS_CONFIG = 8,
} RbStatus;

typedef struct RbBasis RbBasis;

typedef struct RbSnapshots RbSnapshots;

typedef struct RbSystem RbSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent error on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *rb_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *rb_version(void);

/**
 * Reads a `# snapshot v1` file. Returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
RbSnapshots *rb_snapshots_read(const char *path);

/**
 * Writes a snapshot set in the `# snapshot v1` format.
 *
 * # Safety
 * `snapshots` must be a live handle, `path` a valid NUL-terminated string.
 */
RbStatus rb_snapshots_write(const RbSnapshots *snapshots, const char *path);

/**
 * Runs the 1D viscous Burgers solver.
 *
 * # Safety
 * `initial` must point to `n_cells` readable doubles.
 */
RbSnapshots *rb_simulate_burgers(uintptr_t n_cells,
                                 double x_min,
                                 double x_max,
                                 double viscosity,
                                 const double *initial,
                                 double bc_left,
                                 double bc_right,
                                 double t_end,
                                 double dt,
                                 uintptr_t save_every);

/**
 * # Safety
 * `snapshots` must be a live handle (or null).
 */
uintptr_t rb_snapshots_n_cells(const RbSnapshots *snapshots);

/**
 * # Safety
 * `snapshots` must be a live handle (or null).
 */
uintptr_t rb_snapshots_n_times(const RbSnapshots *snapshots);

/**
 * Copies the state at time index `t` into `out` (`n_cells` doubles).
 *
 * # Safety
 * `out` must point to at least `n_cells` writable doubles.
 */
RbStatus rb_snapshots_state(const RbSnapshots *snapshots, uintptr_t t, double *out);

/**
 * # Safety
 * `snapshots` must be a pointer previously returned by this library and
 * not yet freed (null is ignored).
 */
void rb_snapshots_free(RbSnapshots *snapshots);

/**
 * Computes the POD basis with `n_modes` modes.
 *
 * # Safety
 * `snapshots` must be a live handle.
 */
RbBasis *rb_pod_compute(const RbSnapshots *snapshots, uintptr_t n_modes);

/**
 * # Safety
 * `basis` must be a live handle (or null).
 */
uintptr_t rb_basis_n_modes(const RbBasis *basis);

/**
 * Fraction of snapshot energy captured by the retained modes.
 *
 * # Safety
 * `basis` must be a live handle (or null).
 */
double rb_basis_energy_fraction(const RbBasis *basis);

/**
 * Projects snapshots onto the basis; `out` receives n_times × n_modes
 * coefficients, time-major.
 *
 * # Safety
 * `out` must point to `n_times * n_modes` writable doubles.
 */
RbStatus rb_project(const RbSnapshots *snapshots, const RbBasis *basis, double *out);

/**
 * # Safety
 * `basis` must be a pointer previously returned by this library and not
 * yet freed (null is ignored).
 */
void rb_basis_free(RbBasis *basis);

/**
 * Galerkin-projects the discrete operators of the uniform grid onto the
 * basis.
 *
 * # Safety
 * `basis` must be a live handle.
 */
RbSystem *rb_assemble_rom(const RbBasis *basis,
                          uintptr_t n_cells,
                          double x_min,
                          double x_max,
                          double viscosity);

/**
 * Reads a `# rom v1` file.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
RbSystem *rb_system_read(const char *path);

/**
 * # Safety
 * `system` must be a live handle, `path` a valid NUL-terminated string.
 */
RbStatus rb_system_write(const RbSystem *system, const char *path);

/**
 * # Safety
 * `system` must be a live handle (or null).
 */
uintptr_t rb_system_n_modes(const RbSystem *system);

/**
 * # Safety
 * `system` must be a pointer previously returned by this library and not
 * yet freed (null is ignored).
 */
void rb_system_free(RbSystem *system);

/**
 * Length of the flattened correction vector for `n_modes`:
 * s = n²(1 + n).
 */
uintptr_t rb_correction_param_len(uintptr_t n_modes);

/**
 * Integrates the corrected reduced ODE on the given time grid; `out`
 * receives n_times × n_modes states, time-major. `correction` may be null
 * for the uncorrected model.
 *
 * # Safety
 * `a0` points to n_modes doubles, `times` to n_times doubles, `correction`
 * to `rb_correction_param_len(n_modes)` doubles when non-null, `out` to
 * `n_times * n_modes` writable doubles.
 */
RbStatus rb_integrate_rom(const RbSystem *system,
                          const double *correction,
                          const double *a0,
                          const double *times,
                          uintptr_t n_times,
                          double *out);

/**
 * Cardinality C(m+p, p) of the total-degree multi-index set, or 0 on
 * overflow.
 */
uint64_t rb_multiindex_cardinality(uintptr_t m, uintptr_t p);

/**
 * Runs the full pipeline for a TOML config. `seed` overrides the config
 * seed when non-negative.
 *
 * # Safety
 * `config_path` and `output_dir` must be valid NUL-terminated strings.
 */
RbStatus rb_run_pipeline(const char *config_path, const char *output_dir, int64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ROM_BAYES_H */
