#include "somnolog/somnolog.h"

#include <new>
#include <string>

#include <json.hpp>

#include "somnolog/error.hpp"
#include "somnolog/evaluation.hpp"
#include "somnolog/network.hpp"
#include "somnolog/pipeline.hpp"
#include "somnolog/weak_supervision.hpp"

struct somnolog_context {
  somnolog::KeyValueConfig config;
  std::string last_error;
};

namespace {

somnolog_status to_status(somnolog::ErrorCode code) { return static_cast<somnolog_status>(code); }

std::string error_record(const std::string& stage, const std::string& code, const std::string& message) {
  nlohmann::json j;
  j["error"] = {{"stage", stage}, {"code", code}, {"message", message}};
  return j.dump();
}

// Runs fn, translating exceptions into a status and, when ctx is given, an
// error record. `stage` is read after fn fails, so fn may update it.
template <typename Fn>
somnolog_status guarded(somnolog_context* ctx, const std::string& stage, Fn&& fn) {
  try {
    fn();
    if (ctx) ctx->last_error.clear();
    return SOMNOLOG_OK;
  } catch (const somnolog::Error& e) {
    if (ctx) ctx->last_error = error_record(stage, somnolog::error_code_name(e.code()), e.what());
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    if (ctx) ctx->last_error = error_record(stage, "internal", "out of memory");
    return SOMNOLOG_ERR_INTERNAL;
  } catch (const std::exception& e) {
    if (ctx) ctx->last_error = error_record(stage, "internal", e.what());
    return SOMNOLOG_ERR_INTERNAL;
  }
}

}  // namespace

extern "C" {

const char* somnolog_version(void) { return SOMNOLOG_VERSION; }

const char* somnolog_status_string(somnolog_status status) {
  switch (status) {
    case SOMNOLOG_OK: return "ok";
    case SOMNOLOG_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case SOMNOLOG_ERR_IO: return "io";
    case SOMNOLOG_ERR_PARSE: return "parse";
    case SOMNOLOG_ERR_CONTRACT: return "contract";
    case SOMNOLOG_ERR_NUMERIC: return "numeric";
    case SOMNOLOG_ERR_UNKNOWN_STAGE: return "unknown_stage";
    case SOMNOLOG_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

somnolog_status somnolog_context_create(somnolog_context** out) {
  if (!out) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  *out = new (std::nothrow) somnolog_context();
  return *out ? SOMNOLOG_OK : SOMNOLOG_ERR_INTERNAL;
}

void somnolog_context_destroy(somnolog_context* ctx) { delete ctx; }

somnolog_status somnolog_config_set(somnolog_context* ctx, const char* key, const char* value) {
  if (!ctx) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  return guarded(ctx, "config", [&] {
    if (!key || !value || !*key) throw somnolog::Error(somnolog::ErrorCode::InvalidArgument, "null or empty key/value");
    ctx->config.set(key, value);
  });
}

somnolog_status somnolog_config_load(somnolog_context* ctx, const char* path) {
  if (!ctx) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  return guarded(ctx, "config", [&] {
    if (!path) throw somnolog::Error(somnolog::ErrorCode::InvalidArgument, "null path");
    ctx->config.merge(somnolog::KeyValueConfig::load(path));
  });
}

somnolog_status somnolog_run_stage(somnolog_context* ctx, const char* stage) {
  if (!ctx) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  const std::string name = stage ? stage : "";
  std::string current = name;
  return guarded(ctx, current, [&] {
    // The stage name is checked before the configuration.
    std::vector<somnolog::Stage> stages;
    if (name != "all") stages.push_back(somnolog::parse_stage(name));
    current = "config";
    const auto config = somnolog::PipelineConfig::from(ctx->config);
    if (name == "all") stages = somnolog::default_chain(config);
    for (auto s : stages) {
      current = std::string(somnolog::stage_key(s));
      somnolog::run_stage(s, config);
    }
  });
}

const char* somnolog_last_error(const somnolog_context* ctx) { return ctx ? ctx->last_error.c_str() : ""; }

somnolog_status somnolog_soft_labels(const int* labels, const unsigned char* valid, size_t k, size_t t_len,
                                     double* p_hat, int* votes, int* k_effective) {
  if ((!labels || !valid) && k * t_len > 0) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  if ((!p_hat || !votes || !k_effective) && t_len > 0) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  return guarded(nullptr, "soft_labels", [&] {
    std::vector<std::string> names(k);
    for (size_t i = 0; i < k; ++i) names[i] = "l" + std::to_string(i);
    somnolog::WeakLabelMatrix m(names, t_len);
    for (size_t i = 0; i < k; ++i) {
      for (size_t t = 0; t < t_len; ++t) {
        if (valid[i * t_len + t]) {
          m.set(i, t, labels[i * t_len + t]);
        } else {
          m.set_invalid(i, t);
        }
      }
    }
    const auto s = somnolog::soft_labels(m);
    for (size_t t = 0; t < t_len; ++t) {
      p_hat[t] = s.p_hat[t];
      votes[t] = s.votes[t];
      k_effective[t] = s.k_effective[t];
    }
  });
}

somnolog_status somnolog_binomial_nll(const int* votes, const int* k_effective, const double* probs, size_t t_len,
                                      double* out) {
  if (!out || ((!votes || !k_effective || !probs) && t_len > 0)) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  return guarded(nullptr, "binomial_nll", [&] {
    somnolog::SoftLabelSeries s;
    s.votes.assign(votes, votes + t_len);
    s.k_effective.assign(k_effective, k_effective + t_len);
    s.p_hat.resize(t_len, 0.0);
    s.majority.resize(t_len, 0);
    for (size_t t = 0; t < t_len; ++t) {
      if (s.k_effective[t] < 0 || s.votes[t] < 0 || s.votes[t] > s.k_effective[t]) {
        throw somnolog::Error(somnolog::ErrorCode::Contract, "votes must lie in [0, k_effective]");
      }
      if (s.k_effective[t] > 0) s.p_hat[t] = static_cast<double>(s.votes[t]) / s.k_effective[t];
    }
    *out = somnolog::binomial_nll(s, std::span<const double>(probs, t_len));
  });
}

somnolog_status somnolog_expected_calibration_error(const double* preds, const int* truth, size_t n, int n_bins,
                                                    double* out) {
  if (!out || !preds || !truth) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  return guarded(nullptr, "ece", [&] {
    *out = somnolog::expected_calibration_error(std::span<const double>(preds, n), std::span<const int>(truth, n),
                                                somnolog::CalibrationConfig{n_bins});
  });
}

somnolog_status somnolog_mean_prediction_entropy(const double* preds, size_t n, double* out) {
  if (!out || !preds) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  return guarded(nullptr, "entropy",
                 [&] { *out = somnolog::mean_prediction_entropy(std::span<const double>(preds, n)); });
}

somnolog_status somnolog_tempered_sigmoid(double z, double temperature, double* out) {
  if (!out) return SOMNOLOG_ERR_INVALID_ARGUMENT;
  return guarded(nullptr, "tempered_sigmoid", [&] { *out = somnolog::tempered_sigmoid(z, temperature); });
}

}  // extern "C"
