#ifndef PSOPF_H
#define PSOPF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum PsopfStatus {
  PSOPF_STATUS_OK = 0,
  PSOPF_STATUS_NULL_POINTER = 1,
  PSOPF_STATUS_INVALID_UTF8 = 2,
  PSOPF_STATUS_PARSE_ERROR = 3,
  PSOPF_STATUS_INVALID_ARGUMENT = 4,
  PSOPF_STATUS_NOT_CONVERGED = 5,
  PSOPF_STATUS_OPTIMIZATION_FAILED = 6,
  PSOPF_STATUS_BUFFER_TOO_SMALL = 7,
  PSOPF_STATUS_PANIC = 99,
} PsopfStatus;

/**
 * A bus/branch network model.
 */
typedef struct PsopfNetwork PsopfNetwork;

/**
 * Outcome of one optimal power flow run.
 */
typedef struct PsopfOpfResult PsopfOpfResult;

/**
 * A converged power-flow solution together with its limit check.
 */
typedef struct PsopfSolution PsopfSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread, or "".
 *
 * The pointer stays valid until the next library call on the same thread.
 */
const char *psopf_last_error(void);

/**
 * Library version as a static string.
 */
const char *psopf_version(void);

/**
 * Releases a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void psopf_string_free(char *s);

/**
 * Creates the bundled IEEE 30-bus test network.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage.
 */
enum PsopfStatus psopf_network_ieee30(struct PsopfNetwork **out);

/**
 * Parses a network from case-file text.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum PsopfStatus psopf_network_from_case(const char *text, struct PsopfNetwork **out);

/**
 * Serializes a network back to case-file text.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_network_to_case(const struct PsopfNetwork *net, char **out);

/**
 * Number of buses in the network.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_network_bus_count(const struct PsopfNetwork *net, size_t *out);

/**
 * Total active demand in MW.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_network_total_load_mw(const struct PsopfNetwork *net, double *out);

/**
 * Scales every load in place so total active demand equals `total_mw`,
 * keeping each bus's power factor.
 *
 * # Safety
 * `net` must be a live handle.
 */
enum PsopfStatus psopf_network_scale_load(struct PsopfNetwork *net, double total_mw);

/**
 * Releases a network. Null is a no-op.
 *
 * # Safety
 * `net` must come from this library and must not be used afterwards.
 */
void psopf_network_free(struct PsopfNetwork *net);

/**
 * Solves the power flow at the network's current settings.
 *
 * # Safety
 * `net` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_powerflow_solve(const struct PsopfNetwork *net, struct PsopfSolution **out);

/**
 * Newton iterations the solve took.
 *
 * # Safety
 * `sol` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_solution_iterations(const struct PsopfSolution *sol, size_t *out);

/**
 * Number of operating-limit violations at the solution.
 *
 * # Safety
 * `sol` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_solution_violation_count(const struct PsopfSolution *sol, size_t *out);

/**
 * Copies bus voltage magnitudes (pu) and angles (rad) in network bus order.
 *
 * Either output may be null to skip it. `len` is the capacity of each
 * buffer and must be at least the bus count.
 *
 * # Safety
 * Non-null buffers must hold `len` doubles.
 */
enum PsopfStatus psopf_solution_voltages(const struct PsopfSolution *sol,
                                         double *v_mag,
                                         double *v_angle,
                                         size_t len);

/**
 * JSON object with `solution` and `violations`.
 *
 * # Safety
 * `sol` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_solution_to_json(const struct PsopfSolution *sol, char **out);

/**
 * Releases a solution. Null is a no-op.
 *
 * # Safety
 * `sol` must come from this library and must not be used afterwards.
 */
void psopf_solution_free(struct PsopfSolution *sol);

/**
 * Sensitivity matrices and control ranking at the solved point, as JSON.
 *
 * `candidates` is a comma-separated list of control labels such as
 * `"V_G2,T_6-9,Q_C10"`; null selects the default candidates. A `top` of 0
 * keeps every ranked control.
 *
 * # Safety
 * `sol` must be a live handle; `candidates` null or NUL-terminated; `out` writable.
 */
enum PsopfStatus psopf_sensitivity_json(const struct PsopfSolution *sol,
                                        const char *candidates,
                                        size_t top,
                                        char **out);

/**
 * Runs the particle-swarm OPF.
 *
 * `controls` is `"full"`, `"pg+vg"`, `"pg+vg:1,2,5,8"` or a comma-separated
 * label list; null means `"full"`. `config_toml` holds optional `[pso]`,
 * `[penalty]` and `[powerflow]` tables; null uses defaults. `seed` always
 * overrides any seed in the configuration.
 *
 * # Safety
 * `net` must be a live handle; string arguments null or NUL-terminated;
 * `out` writable.
 */
enum PsopfStatus psopf_opf_solve(const struct PsopfNetwork *net,
                                 const char *controls,
                                 const char *config_toml,
                                 uint64_t seed,
                                 struct PsopfOpfResult **out);

/**
 * Fuel cost in $/hr at the reported optimum.
 *
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_opf_result_cost(const struct PsopfOpfResult *res, double *out);

/**
 * Number of limit violations at the reported optimum.
 *
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_opf_result_violation_count(const struct PsopfOpfResult *res, size_t *out);

/**
 * Full result as JSON: controls, generator outputs, solution, trace.
 *
 * # Safety
 * `res` must be a live handle; `out` must be writable.
 */
enum PsopfStatus psopf_opf_result_to_json(const struct PsopfOpfResult *res, char **out);

/**
 * Releases an OPF result. Null is a no-op.
 *
 * # Safety
 * `res` must come from this library and must not be used afterwards.
 */
void psopf_opf_result_free(struct PsopfOpfResult *res);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PSOPF_H */
