#ifndef BCL_H
#define BCL_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call. Details go to `bcl_last_error`.
 */
typedef enum {
  BCL_STATUS_OK = 0,
  BCL_STATUS_NULL_POINTER = 1,
  BCL_STATUS_INVALID_ARGUMENT = 2,
  BCL_STATUS_PARSE = 3,
  BCL_STATUS_IO = 4,
  BCL_STATUS_INFEASIBLE = 5,
  BCL_STATUS_PRECONDITION = 6,
  BCL_STATUS_NON_FINITE = 7,
  BCL_STATUS_BUFFER_TOO_SMALL = 8,
  BCL_STATUS_PANIC = 99,
} BclStatus;

/**
 * Matrix-inequality form used by a certificate search.
 */
typedef enum {
  BCL_LMI_FORM_EQ5 = 0,
  BCL_LMI_FORM_H_MATRIX = 1,
} BclLmiForm;

/**
 * Invariant-set certificate.
 */
typedef struct BclCertificate BclCertificate;

/**
 * Parsed scenario.
 */
typedef struct BclScenario BclScenario;

/**
 * Recorded closed-loop run.
 */
typedef struct BclTrace BclTrace;

/**
 * Scalar fields of a certificate.
 */
typedef struct {
  size_t order;
  bool feasible;
  bool disturbance_ok;
  /**
   * NaN when the certificate carries no `V_h`.
   */
  double v_h;
  double alpha;
  double eps_lmi;
  double kappa;
  double gamma_inf;
  double decay_slack;
  double coupling_slack;
  /**
   * NaN when not computed.
   */
  double witness_slack;
} BclCertificateInfo;

/**
 * Options for [`bcl_simulate`]; pass NULL for the scenario's own settings.
 */
typedef struct {
  /**
   * Disturbance variant, 0 is nominal.
   */
  uint64_t seed;
  /**
   * 0 keeps the scenario's value.
   */
  size_t record_every;
  bool force;
} BclRunOptions;

/**
 * Run statistics over every integration step.
 */
typedef struct {
  size_t steps;
  double max_abs_s1;
  double max_abs_e;
  double max_level_ratio;
  double max_envelope_ratio;
  size_t violations;
  size_t level_exits;
  double saturation_duty;
  double initial_level_ratio;
  bool certified;
} BclSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bcl_version(void);

/**
 * Releases a string returned by the library. NULL is ignored.
 */
void bcl_string_free(char *s);

/**
 * Parses scenario TOML. Relative paths inside it resolve against the
 * current directory.
 */
BclStatus bcl_scenario_from_toml(const char *text, BclScenario **out);

/**
 * Loads a scenario file.
 */
BclStatus bcl_scenario_load(const char *path, BclScenario **out);

/**
 * Serializes a scenario back to TOML.
 */
BclStatus bcl_scenario_to_toml(const BclScenario *sc, char **out);

void bcl_scenario_free(BclScenario *sc);

/**
 * Searches a trivial certificate for stage gains `gains[0..n]` with every
 * input gain in `[g_min, g_max]`. An infeasible result is still returned
 * through `out` together with an `Infeasible` status.
 */
BclStatus bcl_certificate_search(const double *gains,
                                 size_t n,
                                 double kappa,
                                 double w_scale,
                                 double g_min,
                                 double g_max,
                                 BclLmiForm form,
                                 BclCertificate **out);

/**
 * Parses the text form written by `bcl check-lmi --out`.
 */
BclStatus bcl_certificate_from_text(const char *text, BclCertificate **out);

BclStatus bcl_certificate_to_text(const BclCertificate *cert, char **out);

BclStatus bcl_certificate_info(const BclCertificate *cert, BclCertificateInfo *out);

void bcl_certificate_free(BclCertificate *cert);

/**
 * Runs a scenario. `cert` and `opts` may be NULL; without a certificate the
 * scenario's own (file or search) is used.
 */
BclStatus bcl_simulate(const BclScenario *sc,
                       const BclCertificate *cert,
                       const BclRunOptions *opts,
                       BclTrace **out);

/**
 * Number of recorded rows; 0 for NULL.
 */
size_t bcl_trace_len(const BclTrace *tr);

BclStatus bcl_trace_summary(const BclTrace *tr, BclSummary *out);

/**
 * Copies column `name` (CSV header names such as `x1`, `rho`, `u_applied`)
 * into `buf`. With `buf` NULL only `*len_out` is set. Fails with
 * `BufferTooSmall` when `cap` is less than the row count.
 */
BclStatus bcl_trace_column(const BclTrace *tr,
                           const char *name,
                           double *buf,
                           size_t cap,
                           size_t *len_out);

BclStatus bcl_trace_to_csv(const BclTrace *tr, char **out);

void bcl_trace_free(BclTrace *tr);

/**
 * Performance function `ρ(t)`.
 */
BclStatus bcl_ppf(double rho0, double rho_inf, double kappa, double t, double *out);

BclStatus bcl_saturate(double u, double u_min, double u_max, double *out);

/**
 * Error transform `T(z)` on the band `(-delta_underbar, delta_bar)`.
 */
BclStatus bcl_etf_forward(double delta_bar, double delta_underbar, double z, double *out);

/**
 * `T⁻¹(r)`; ratios outside the band are clamped just inside it.
 */
BclStatus bcl_etf_inverse(double delta_bar, double delta_underbar, double r, double *out);

/**
 * Message of the last failed call on this thread, or NULL. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *bcl_last_error(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BCL_H */
