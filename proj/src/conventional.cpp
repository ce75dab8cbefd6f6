#include "somnolog/conventional.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>

#include "somnolog/error.hpp"
#include "somnolog/hmm.hpp"

namespace somnolog {

std::string_view algorithm_key(AlgorithmId id) {
  switch (id) {
    case AlgorithmId::Sadeh: return "sadeh";
    case AlgorithmId::ColeKripke: return "ck";
    case AlgorithmId::Oakley: return "oakley";
    case AlgorithmId::Sazonov: return "sazonov";
    case AlgorithmId::Hmm: return "hmm";
  }
  return "unknown";
}

AlgorithmId parse_algorithm(std::string_view key) {
  const std::string k = trim(key);
  if (k == "sadeh") return AlgorithmId::Sadeh;
  if (k == "ck" || k == "cole-kripke" || k == "colekripke") return AlgorithmId::ColeKripke;
  if (k == "oakley") return AlgorithmId::Oakley;
  if (k == "sazonov") return AlgorithmId::Sazonov;
  if (k == "hmm") return AlgorithmId::Hmm;
  throw Error(ErrorCode::InvalidArgument, "unknown algorithm '" + k + "'");
}

std::vector<AlgorithmId> parse_algorithm_list(std::string_view comma_separated) {
  std::vector<AlgorithmId> out;
  for (const auto& part : split(comma_separated, ',')) {
    if (trim(part).empty()) continue;
    const AlgorithmId id = parse_algorithm(part);
    if (std::find(out.begin(), out.end(), id) != out.end()) {
      throw Error(ErrorCode::InvalidArgument, "algorithm listed twice: " + trim(part));
    }
    out.push_back(id);
  }
  if (out.empty()) throw Error(ErrorCode::InvalidArgument, "empty algorithm set");
  return out;
}

namespace {

template <std::size_t N>
void assign_list(std::array<double, N>& target, const std::string& value, const std::string& key) {
  const auto parts = split(value, ',');
  if (parts.size() != N) {
    throw Error(ErrorCode::Parse, key + ": expected " + std::to_string(N) + " comma-separated values");
  }
  for (std::size_t i = 0; i < N; ++i) target[i] = parse_double(parts[i], key);
}

int as_int(const std::string& value, const std::string& key) { return static_cast<int>(parse_int(value, key)); }

}  // namespace

void LabelerConfig::apply(const KeyValueConfig& overrides) {
  using Setter = std::function<void(const std::string&, const std::string&)>;
  const auto real = [](double& field) -> Setter {
    return [&field](const std::string& v, const std::string& k) { field = parse_double(v, k); };
  };
  const auto integer = [](int& field) -> Setter {
    return [&field](const std::string& v, const std::string& k) { field = as_int(v, k); };
  };
  const std::map<std::string, Setter, std::less<>> setters{
      {"sadeh.intercept", real(sadeh.intercept)},
      {"sadeh.w_mean", real(sadeh.w_mean)},
      {"sadeh.w_nat", real(sadeh.w_nat)},
      {"sadeh.w_sd", real(sadeh.w_sd)},
      {"sadeh.w_log", real(sadeh.w_log)},
      {"sadeh.half_window", integer(sadeh.half_window)},
      {"sadeh.sd_length", integer(sadeh.sd_length)},
      {"sadeh.nat_low", real(sadeh.nat_low)},
      {"sadeh.nat_high", real(sadeh.nat_high)},
      {"sadeh.count_cap", real(sadeh.count_cap)},
      {"ck.scale", real(cole_kripke.scale)},
      {"ck.threshold", real(cole_kripke.threshold)},
      {"ck.weights", [this](const std::string& v, const std::string& k) { assign_list(cole_kripke.weights, v, k); }},
      {"oakley.threshold",
       [this](const std::string& v, const std::string& k) {
         if (v == "low") {
           oakley.threshold = 20.0;
         } else if (v == "medium") {
           oakley.threshold = 40.0;
         } else if (v == "high") {
           oakley.threshold = 80.0;
         } else {
           oakley.threshold = parse_double(v, k);
         }
       }},
      {"oakley.weights_30s", [this](const std::string& v, const std::string& k) { assign_list(oakley.weights_30s, v, k); }},
      {"oakley.weights_60s", [this](const std::string& v, const std::string& k) { assign_list(oakley.weights_60s, v, k); }},
      {"sazonov.intercept", real(sazonov.intercept)},
      {"sazonov.weights", [this](const std::string& v, const std::string& k) { assign_list(sazonov.weights, v, k); }},
      {"hmm.max_iter", integer(hmm.max_iter)},
      {"hmm.tol", real(hmm.tol)},
  };
  for (const auto& [key, value] : overrides.entries()) {
    const auto dot = key.find('.');
    const std::string prefix = key.substr(0, dot);
    if (prefix != "sadeh" && prefix != "ck" && prefix != "oakley" && prefix != "sazonov" && prefix != "hmm") continue;
    const auto it = setters.find(key);
    if (it == setters.end()) throw Error(ErrorCode::Parse, "unknown labeler parameter '" + key + "'");
    it->second(value, key);
  }
  validate();
}

void LabelerConfig::validate() const {
  const auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(sadeh.intercept) || !finite(sadeh.w_mean) || !finite(sadeh.w_nat) || !finite(sadeh.w_sd) ||
      !finite(sadeh.w_log) || !finite(cole_kripke.scale) || !finite(cole_kripke.threshold) ||
      !finite(oakley.threshold) || !finite(sazonov.intercept)) {
    throw Error(ErrorCode::Contract, "labeler coefficients and thresholds must be finite");
  }
  if (sadeh.half_window < 1 || sadeh.sd_length < 2 || sadeh.sd_length > sadeh.half_window + 1) {
    throw Error(ErrorCode::Contract, "sadeh: window extents incompatible");
  }
  if (hmm.max_iter < 1 || !(hmm.tol > 0.0)) throw Error(ErrorCode::Contract, "hmm: invalid iteration settings");
}

double sadeh_score(std::span<const double> counts, std::size_t t, const SadehParams& p) {
  const auto capped = [&](std::size_t i) {
    return p.count_cap > 0.0 ? std::min(counts[i], p.count_cap) : counts[i];
  };
  const std::size_t half = static_cast<std::size_t>(p.half_window);
  double sum = 0.0;
  int nat = 0;
  for (std::size_t i = t - half; i <= t + half; ++i) {
    const double c = capped(i);
    sum += c;
    if (c >= p.nat_low && c < p.nat_high) ++nat;
  }
  const double mean = sum / static_cast<double>(2 * half + 1);

  const std::size_t n_sd = static_cast<std::size_t>(p.sd_length);
  double sd_mean = 0.0;
  for (std::size_t i = t + 1 - n_sd; i <= t; ++i) sd_mean += capped(i);
  sd_mean /= static_cast<double>(n_sd);
  double ss = 0.0;
  for (std::size_t i = t + 1 - n_sd; i <= t; ++i) ss += (capped(i) - sd_mean) * (capped(i) - sd_mean);
  const double sd = std::sqrt(ss / static_cast<double>(n_sd - 1));

  const double lg = std::log(capped(t) + 1.0);
  return p.intercept + p.w_mean * mean + p.w_nat * nat + p.w_sd * sd + p.w_log * lg;
}

std::optional<int> sadeh_label(std::span<const double> counts, std::size_t t, const SadehParams& p) {
  const std::size_t half = static_cast<std::size_t>(p.half_window);
  if (t >= counts.size() || t < half || t + half >= counts.size()) return std::nullopt;
  return sadeh_score(counts, t, p) >= 0.0 ? 1 : 0;
}

std::optional<int> cole_kripke_label(std::span<const double> counts, std::size_t t, const ColeKripkeParams& p) {
  if (t >= counts.size() || t < 4 || t + 2 >= counts.size()) return std::nullopt;
  double d = 0.0;
  for (std::size_t j = 0; j < 7; ++j) d += p.weights[j] * counts[t - 4 + j];
  return p.scale * d < p.threshold ? 1 : 0;
}

std::optional<int> oakley_label(std::span<const double> counts, std::size_t t, int epoch_seconds,
                                const OakleyParams& p) {
  std::span<const double> weights;
  if (epoch_seconds == 30) {
    weights = p.weights_30s;
  } else if (epoch_seconds == 60) {
    weights = p.weights_60s;
  } else {
    throw Error(ErrorCode::Contract, "oakley: unsupported epoch length " + std::to_string(epoch_seconds) + " s");
  }
  const std::size_t half = weights.size() / 2;
  if (t >= counts.size() || t < half || t + half >= counts.size()) return std::nullopt;
  double total = 0.0;
  for (std::size_t j = 0; j < weights.size(); ++j) total += weights[j] * counts[t - half + j];
  return total < p.threshold ? 1 : 0;
}

double sazonov_score(std::span<const double> counts, std::size_t t, const SazonovParams& p) {
  double score = p.intercept;
  double running_max = 0.0;
  for (std::size_t w = 0; w < p.weights.size(); ++w) {
    running_max = std::max(running_max, counts[t - w]);
    score += p.weights[w] * running_max;
  }
  return score;
}

std::optional<int> sazonov_label(std::span<const double> counts, std::size_t t, const SazonovParams& p) {
  if (t >= counts.size() || t + 1 < p.weights.size()) return std::nullopt;
  const double probability = 1.0 / (1.0 + std::exp(-sazonov_score(counts, t, p)));
  return probability >= 0.5 ? 1 : 0;
}

namespace {

void require_supported_epoch(const EpochSeries& series) {
  if (series.epoch_seconds != 30 && series.epoch_seconds != 60) {
    throw Error(ErrorCode::Contract, "conventional labelers support 30 s or 60 s epochs, got " +
                                         std::to_string(series.epoch_seconds) + " s");
  }
}

// Scores at minute resolution and maps each minute back onto its native
// epochs. A trailing 30 s epoch without a partner stays unlabelable.
template <typename Scorer>
LabelTrack minute_scale_track(const EpochSeries& series, Scorer scorer) {
  const std::size_t n = series.size();
  LabelTrack track{std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0)};
  const std::size_t factor = static_cast<std::size_t>(60 / series.epoch_seconds);
  std::vector<double> minutes;
  if (factor == 1) {
    minutes = series.counts;
  } else {
    minutes = aggregate_epochs(series, 60).counts;
  }
  for (std::size_t m = 0; m < minutes.size(); ++m) {
    const std::optional<int> label = scorer(std::span<const double>(minutes), m);
    if (!label) continue;
    for (std::size_t j = 0; j < factor; ++j) {
      track.labels[m * factor + j] = static_cast<std::uint8_t>(*label);
      track.valid[m * factor + j] = 1;
    }
  }
  return track;
}

template <typename Scorer>
LabelTrack native_track(const EpochSeries& series, Scorer scorer) {
  const std::size_t n = series.size();
  LabelTrack track{std::vector<std::uint8_t>(n, 0), std::vector<std::uint8_t>(n, 0)};
  for (std::size_t t = 0; t < n; ++t) {
    const std::optional<int> label = scorer(std::span<const double>(series.counts), t);
    if (!label) continue;
    track.labels[t] = static_cast<std::uint8_t>(*label);
    track.valid[t] = 1;
  }
  return track;
}

}  // namespace

LabelTrack run_labeler(const EpochSeries& series, AlgorithmId id, const LabelerConfig& config) {
  require_supported_epoch(series);
  switch (id) {
    case AlgorithmId::Sadeh:
      return minute_scale_track(series, [&](std::span<const double> c, std::size_t t) {
        return sadeh_label(c, t, config.sadeh);
      });
    case AlgorithmId::ColeKripke:
      return minute_scale_track(series, [&](std::span<const double> c, std::size_t t) {
        return cole_kripke_label(c, t, config.cole_kripke);
      });
    case AlgorithmId::Oakley:
      return native_track(series, [&](std::span<const double> c, std::size_t t) {
        return oakley_label(c, t, series.epoch_seconds, config.oakley);
      });
    case AlgorithmId::Sazonov:
      return native_track(series, [&](std::span<const double> c, std::size_t t) {
        return sazonov_label(c, t, config.sazonov);
      });
    case AlgorithmId::Hmm: {
      const std::vector<double> obs = log_activity(series.counts);
      HmmFitOptions options;
      options.max_iter = config.hmm.max_iter;
      options.tol = config.hmm.tol;
      const HmmFitResult fit = hmm_fit(obs, options);
      LabelTrack track{std::vector<std::uint8_t>(obs.size(), 0), std::vector<std::uint8_t>(obs.size(), 1)};
      if (!fit.degenerate) {
        const std::vector<int> labels = hmm_decode(obs, fit.params);
        std::copy(labels.begin(), labels.end(), track.labels.begin());
      }
      return track;
    }
  }
  throw Error(ErrorCode::InvalidArgument, "unknown algorithm");
}

WeakLabelMatrix run_ensemble(const EpochSeries& series, std::span<const AlgorithmId> algorithms,
                             const LabelerConfig& config) {
  if (algorithms.empty()) throw Error(ErrorCode::InvalidArgument, "empty algorithm set");
  series.validate();
  std::vector<std::string> names;
  for (AlgorithmId id : algorithms) names.emplace_back(algorithm_key(id));
  WeakLabelMatrix matrix(std::move(names), series.size());
  for (std::size_t i = 0; i < algorithms.size(); ++i) {
    const LabelTrack track = run_labeler(series, algorithms[i], config);
    matrix.set_row(i, track.labels, track.valid);
  }
  return matrix;
}

}  // namespace somnolog
