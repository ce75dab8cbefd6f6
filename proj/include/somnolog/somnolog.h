#ifndef SOMNOLOG_SOMNOLOG_H
#define SOMNOLOG_SOMNOLOG_H

#include <stddef.h>

#if defined(_WIN32)
#  if defined(SOMNOLOG_BUILDING_LIBRARY)
#    define SOMNOLOG_API __declspec(dllexport)
#  else
#    define SOMNOLOG_API __declspec(dllimport)
#  endif
#elif defined(SOMNOLOG_BUILDING_LIBRARY)
#  define SOMNOLOG_API __attribute__((visibility("default")))
#else
#  define SOMNOLOG_API
#endif

#ifdef __cplusplus
extern "C" {
#endif

#define SOMNOLOG_VERSION "0.1.0"

typedef enum somnolog_status {
  SOMNOLOG_OK = 0,
  SOMNOLOG_ERR_INVALID_ARGUMENT = 1,
  SOMNOLOG_ERR_IO = 2,
  SOMNOLOG_ERR_PARSE = 3,
  SOMNOLOG_ERR_CONTRACT = 4,
  SOMNOLOG_ERR_NUMERIC = 5,
  SOMNOLOG_ERR_UNKNOWN_STAGE = 6,
  SOMNOLOG_ERR_INTERNAL = 99
} somnolog_status;

typedef struct somnolog_context somnolog_context;

SOMNOLOG_API const char* somnolog_version(void);
SOMNOLOG_API const char* somnolog_status_string(somnolog_status status);

/* A context owns a key-value configuration and the last error record. It is
   not thread-safe; use one context per thread. */
SOMNOLOG_API somnolog_status somnolog_context_create(somnolog_context** out);
SOMNOLOG_API void somnolog_context_destroy(somnolog_context* ctx);

/* Later assignments override earlier ones; load merges a key-value file. */
SOMNOLOG_API somnolog_status somnolog_config_set(somnolog_context* ctx, const char* key, const char* value);
SOMNOLOG_API somnolog_status somnolog_config_load(somnolog_context* ctx, const char* path);

/* stage: synth, label, train, predict, evaluate, profile, report, or "all"
   for the default chain. */
SOMNOLOG_API somnolog_status somnolog_run_stage(somnolog_context* ctx, const char* stage);

/* JSON error record of the last failing call on ctx,
   {"error":{"stage":...,"code":...,"message":...}}, or "" after a success.
   Valid until the next call on ctx. */
SOMNOLOG_API const char* somnolog_last_error(const somnolog_context* ctx);

/* labels and valid are k x t_len row-major (labeler-major) 0/1 arrays.
   Outputs have t_len entries; unscored epochs get p_hat 0 and k_eff 0. */
SOMNOLOG_API somnolog_status somnolog_soft_labels(const int* labels, const unsigned char* valid, size_t k,
                                                  size_t t_len, double* p_hat, int* votes, int* k_effective);

/* -sum_t [y_t ln f_t + (k_t - y_t) ln(1 - f_t)], f clamped to [1e-7, 1 - 1e-7]. */
SOMNOLOG_API somnolog_status somnolog_binomial_nll(const int* votes, const int* k_effective, const double* probs,
                                                   size_t t_len, double* out);

SOMNOLOG_API somnolog_status somnolog_expected_calibration_error(const double* preds, const int* truth, size_t n,
                                                                 int n_bins, double* out);
SOMNOLOG_API somnolog_status somnolog_mean_prediction_entropy(const double* preds, size_t n, double* out);
SOMNOLOG_API somnolog_status somnolog_tempered_sigmoid(double z, double temperature, double* out);

#ifdef __cplusplus
}
#endif

#endif
