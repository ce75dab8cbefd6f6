// Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include <nlohmann/json.hpp>

#include "somnolog/evaluation.hpp"
#include "somnolog/hmm.hpp"
#include "somnolog/network.hpp"
#include "somnolog/random.hpp"
#include "somnolog/somnolog.h"
#include "somnolog/training.hpp"
#include "somnolog/weak_supervision.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace somnolog;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buffer[512];
  std::snprintf(buffer, sizeof buffer, format, args...);
  return buffer;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("somnolog_acceptance_" + std::to_string(::getpid())) / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

// 1. Binomial likelihood of the votes equals k times the summed soft cross-entropy.
Outcome binomial_equivalence() {
  const auto start = Clock::now();
  Rng rng(1001);
  double worst = 0.0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t k = 1 + rng.below(10);
    const std::size_t length = 1 + rng.below(100);
    std::vector<std::string> names(k, "l");
    WeakLabelMatrix m(names, length);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t t = 0; t < length; ++t) m.set(i, t, rng.bernoulli(rng.uniform()) ? 1 : 0);
    }
    const SoftLabelSeries s = soft_labels(m);
    std::vector<double> f(length);
    for (auto& x : f) x = 1e-3 + (1.0 - 2e-3) * rng.uniform();
    double soft = 0.0;
    for (std::size_t t = 0; t < length; ++t) {
      soft -= s.p_hat[t] * std::log(f[t]) + (1.0 - s.p_hat[t]) * std::log(1.0 - f[t]);
    }
    const double nll = binomial_nll(s, f);
    worst = std::max(worst, std::abs(nll - static_cast<double>(k) * soft) / std::abs(nll));
  }
  const double elapsed = seconds_since(start);
  return {worst < 1e-9 && elapsed < 1.0, fmt("max relative gap %.3e over 1000 cases in %.3f s", worst, elapsed)};
}

// 2. Backpropagation against central differences at toy sizes.
Outcome gradient_correctness() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_case;
  for (Architecture a : {Architecture::Mlp, Architecture::Cnn, Architecture::Lstm}) {
    NetworkSpec spec = NetworkSpec::defaults(a, 9);
    spec.dense_widths = a == Architecture::Mlp ? std::vector<int>{6, 5} : std::vector<int>{5};
    spec.conv_kernel = 3;
    spec.conv_channels = a == Architecture::Cnn ? std::vector<int>{2, 3} : std::vector<int>{};
    spec.lstm_hidden = 4;
    spec.dropout = 0.3;
    const ParameterSet params = build_network(spec, 17);
    Rng rng(18);
    Matrix x(9, 6);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    std::vector<double> soft(6);
    for (auto& y : soft) y = rng.uniform();
    std::vector<double> hard(6);
    std::transform(soft.begin(), soft.end(), hard.begin(), [](double y) { return y > 0.5 ? 1.0 : 0.0; });
    for (LossKind kind : {LossKind::SoftCrossEntropy, LossKind::HardCrossEntropy, LossKind::BrierScore}) {
      const auto& targets = kind == LossKind::HardCrossEntropy ? hard : soft;
      const GradientCheckResult r = check_gradients(spec, params, x, targets, kind, 23);
      if (r.max_relative_error >= worst) {
        worst = r.max_relative_error;
        worst_case = std::string(architecture_key(a)) + "/" + std::string(loss_key(kind));
      }
    }
  }
  const double elapsed = seconds_since(start);
  return {worst < 1e-4 && elapsed < 60.0,
          fmt("max relative error %.3e (%s) in %.2f s", worst, worst_case.c_str(), elapsed)};
}

// 3. Baum-Welch monotonicity and exhaustive posterior decoding.
Outcome hmm_properties() {
  const auto start = Clock::now();
  Rng rng(3003);
  std::vector<double> obs;
  int state = 0;
  for (int t = 0; t < 400; ++t) {
    if (rng.uniform() < 0.04) state = 1 - state;
    obs.push_back(std::log1p(state ? rng.gamma(1.0, 5.0) : rng.gamma(1.0, 150.0)));
  }
  const auto random_params = [&rng] {
    HmmParams p;
    const double a = 0.05 + 0.9 * rng.uniform(), b = 0.05 + 0.9 * rng.uniform(), c = 0.05 + 0.9 * rng.uniform();
    p.initial = {a, 1.0 - a};
    p.transition = {{{b, 1.0 - b}, {1.0 - c, c}}};
    p.mean = {6.0 * rng.uniform(), 6.0 * rng.uniform()};
    p.var = {0.2 + 3.0 * rng.uniform(), 0.2 + 3.0 * rng.uniform()};
    return p;
  };
  double worst_drop = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    HmmFitOptions options;
    options.init = random_params();
    options.tol = 1e-10;
    const HmmFitResult fit = hmm_fit(obs, options);
    for (std::size_t i = 1; i < fit.log_likelihood.size(); ++i) {
      worst_drop = std::max(worst_drop, fit.log_likelihood[i - 1] - fit.log_likelihood[i]);
    }
  }

  std::size_t sequences = 0, mismatches = 0;
  for (std::size_t n = 1; n <= 8; ++n) {
    for (int rep = 0; rep < 50; ++rep, ++sequences) {
      const HmmParams p = random_params();
      std::vector<double> x(n);
      for (auto& v : x) v = 6.0 * rng.uniform();
      const auto gauss = [](double v, double m, double s2) {
        return std::exp(-0.5 * (v - m) * (v - m) / s2) / std::sqrt(2.0 * std::numbers::pi * s2);
      };
      std::vector<double> sleep_mass(n, 0.0);
      double total = 0.0;
      const int sleep = p.mean[1] < p.mean[0] ? 1 : 0;
      for (unsigned path = 0; path < (1u << n); ++path) {
        double joint = 1.0;
        for (std::size_t t = 0; t < n; ++t) {
          const unsigned s = (path >> t) & 1u;
          joint *= t == 0 ? p.initial[s] : p.transition[(path >> (t - 1)) & 1u][s];
          joint *= gauss(x[t], p.mean[s], p.var[s]);
        }
        total += joint;
        for (std::size_t t = 0; t < n; ++t) {
          if (static_cast<int>((path >> t) & 1u) == sleep) sleep_mass[t] += joint;
        }
      }
      const std::vector<int> decoded = hmm_decode(x, p);
      bool ok = true;
      for (std::size_t t = 0; t < n; ++t) {
        const double posterior = sleep_mass[t] / total;
        if (std::abs(posterior - 0.5) < 1e-12) continue;
        if (decoded[t] != (posterior > 0.5 ? 1 : 0)) ok = false;
      }
      if (!ok) ++mismatches;
    }
  }
  const double elapsed = seconds_since(start);
  return {worst_drop <= 1e-8 && mismatches == 0 && elapsed < 30.0,
          fmt("largest log-likelihood drop %.3e over 100 starts; %zu/%zu enumerated sequences decoded correctly; %.2f s",
              worst_drop, sequences - mismatches, sequences, elapsed)};
}

// 4. Metric oracles.
Outcome metric_oracles() {
  Rng rng(4004);
  int report_mismatch = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<int> truth(n);
    std::vector<double> probs(n);
    double tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng.bernoulli(0.5) ? 1 : 0;
      probs[i] = rng.uniform();
      const int pred = probs[i] >= 0.5 ? 1 : 0;
      tp += pred == 1 && truth[i] == 1;
      fp += pred == 1 && truth[i] == 0;
      tn += pred == 0 && truth[i] == 0;
      fn += pred == 0 && truth[i] == 1;
    }
    const auto safe = [](double a, double b) { return b == 0.0 ? 0.0 : a / b; };
    const double total = tp + fp + tn + fn;
    const double acc = (tp + tn) / total;
    const double expected = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (total * total);
    const ClassificationReport r = classification_report(confusion_counts(truth, probs));
    const bool same = r.accuracy == acc && r.sensitivity == safe(tp, tp + fn) && r.specificity == safe(tn, tn + fp) &&
                      r.f1 == safe(2 * tp, 2 * tp + fp + fn) && r.kappa == safe(acc - expected, 1.0 - expected) &&
                      r.mcc == safe(tp * tn - fp * fn, std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)));
    if (!same) ++report_mismatch;
  }

  const double hand = expected_calibration_error(std::vector<double>{0.9, 0.9, 0.2}, std::vector<int>{1, 0, 0},
                                                 CalibrationConfig{2});
  std::vector<double> preds;
  std::vector<int> truth;
  for (int i = 0; i < 20; ++i) {
    preds.push_back(0.85);
    truth.push_back(i < 17 ? 1 : 0);
    preds.push_back(0.3);
    truth.push_back(i < 14 ? 0 : 1);
  }
  const double calibrated = expected_calibration_error(preds, truth);

  int columns = 0;
  double variance_gap = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t k = 2 + rng.below(9);
    WeakLabelMatrix m(std::vector<std::string>(k, "l"), 50);
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t t = 0; t < 50; ++t) {
        if (rng.uniform() < 0.1) continue;
        m.set(i, t, rng.bernoulli(0.5) ? 1 : 0);
      }
    }
    const SoftLabelSeries s = soft_labels(m);
    const auto var = ensemble_variance(m);
    for (std::size_t t = 0; t < 50; ++t) {
      if (!var[t]) continue;
      const double kt = s.k_effective[t];
      variance_gap = std::max(variance_gap, std::abs(*var[t] - kt * s.p_hat[t] * (1.0 - s.p_hat[t]) / (kt - 1.0)));
      ++columns;
    }
  }
  const bool pass = report_mismatch == 0 && std::abs(hand - 1.0 / 3.0) < 1e-12 && calibrated < 1e-12 &&
                    variance_gap < 1e-12;
  return {pass, fmt("report mismatches %d/1000; hand ECE %.15f; calibrated ECE %.3e; variance gap %.3e over %d columns",
                    report_mismatch, hand, calibrated, variance_gap, columns)};
}

struct ApiContext {
  somnolog_context* ctx = nullptr;
  ApiContext() { somnolog_context_create(&ctx); }
  ~ApiContext() { somnolog_context_destroy(ctx); }
  bool set(const std::string& k, const std::string& v) { return somnolog_config_set(ctx, k.c_str(), v.c_str()) == SOMNOLOG_OK; }
};

// 5. End-to-end synthetic experiment with the default configuration.
Outcome end_to_end() {
  const fs::path out = scratch("e2e");
  ApiContext api;
  if (!api.ctx || !api.set("paths.out", out.string()) || !api.set("synth.subjects", "5") ||
      !api.set("synth.days", "7") || !api.set("synth.epoch_seconds", "30") || !api.set("seed", "7") ||
      !api.set("net.architecture", "lstm") || !api.set("train.loss", "soft-ce")) {
    return {false, "could not configure the pipeline"};
  }
  const auto start = Clock::now();
  if (somnolog_run_stage(api.ctx, "all") != SOMNOLOG_OK) return {false, somnolog_last_error(api.ctx)};
  const double elapsed = seconds_since(start);

  const json metrics = json::parse(slurp(out / "reports/metrics_lstm_soft-ce.json"));
  const json& agg = metrics.at("aggregate");
  const double model_mcc = agg.at("model").at("mcc").at("mean").get<double>();
  const double majority_mcc = agg.at("ensemble").at("mcc").at("mean").get<double>();
  const double model_std = agg.at("model").at("mean_std").at("mean").get<double>();
  const double ensemble_std = agg.at("ensemble").at("mean_std").at("mean").get<double>();
  const json profile = json::parse(slurp(out / "profiles/lstm_soft-ce_summary.json"));
  const double model_offset = profile.at("model").at("offset").get<double>();
  const double ensemble_offset = profile.at("ensemble").at("offset").get<double>();

  const bool pass = elapsed < 900.0 && model_mcc >= majority_mcc - 0.05 && model_std < ensemble_std &&
                    model_offset < ensemble_offset;
  fs::remove_all(out);
  return {pass, fmt("%.0f s; MCC model %.3f vs majority %.3f; mean std model %.4f vs ensemble %.4f; "
                    "profile offset model %.4f vs ensemble %.4f",
                    elapsed, model_mcc, majority_mcc, model_std, ensemble_std, model_offset, ensemble_offset)};
}

// 6. Entropy of tempered outputs grows with the temperature.
Outcome temperature_entropy() {
  Rng rng(6006);
  std::vector<double> logits(1000);
  for (auto& z : logits) z = 4.0 * rng.normal();
  std::vector<double> entropies;
  for (double tau : {1.0, 2.0, 4.0, 8.0}) {
    std::vector<double> p(logits.size());
    std::transform(logits.begin(), logits.end(), p.begin(), [tau](double z) { return tempered_sigmoid(z, tau); });
    entropies.push_back(mean_prediction_entropy(p));
  }
  const bool pass = std::is_sorted(entropies.begin(), entropies.end());
  return {pass, fmt("mean entropy %.4f, %.4f, %.4f, %.4f at tau 1, 2, 4, 8", entropies[0], entropies[1],
                    entropies[2], entropies[3])};
}

// 7. Planted daily curves.
Outcome heteroscedasticity_fit() {
  UncertaintyProfile planted(30);
  UncertaintyProfile constant(30);
  for (int t = 0; t < 86400; t += 30) {
    planted.add(t, 0.3 + 0.05 * std::cos(2.0 * std::numbers::pi * (t + 15.0) / 86400.0));
    constant.add(t, 0.3);
  }
  const HeteroscedasticityFit fit = fit_uncertainty_curve(planted);
  const HeteroscedasticityFit flat = fit_uncertainty_curve(constant);
  const double amp_err = std::abs(fit.amplitude - 0.05) / 0.05;
  const double off_err = std::abs(fit.offset - 0.3) / 0.3;
  const bool pass = amp_err < 0.05 && off_err < 0.02 && flat.amplitude < 1e-8;
  return {pass, fmt("amplitude %.5f (%.2f%% off), offset %.5f (%.3f%% off); constant amplitude %.3e", fit.amplitude,
                    100 * amp_err, fit.offset, 100 * off_err, flat.amplitude)};
}

// 8. Byte-identical artifacts across reruns and job counts.
Outcome determinism() {
  const std::vector<std::pair<std::string, std::string>> small{
      {"synth.subjects", "3"}, {"synth.days", "2"},        {"train.max_epochs", "3"},  {"train.learning_rate", "1e-3"},
      {"predict.samples", "8"}, {"profile.pieces", "1"},   {"profile.bin_epochs", "20"}};
  const auto run = [&](const std::string& name, int jobs) -> std::optional<fs::path> {
    const fs::path out = scratch(name);
    ApiContext api;
    for (const auto& [k, v] : small) api.set(k, v);
    api.set("paths.out", out.string());
    api.set("jobs", std::to_string(jobs));
    if (somnolog_run_stage(api.ctx, "all") != SOMNOLOG_OK) return std::nullopt;
    return out;
  };
  const auto collect = [](const fs::path& root) {
    std::map<std::string, std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (!e.is_regular_file()) continue;
      const std::string rel = fs::relative(e.path(), root).generic_string();
      if (rel.rfind("manifests/", 0) == 0) {
        // Manifests carry wall-clock fields; their hashed file lists must still agree.
        const json m = json::parse(slurp(e.path()));
        files[rel] = m.at("inputs").dump() + m.at("outputs").dump() + m.at("experiment_hash").dump();
      } else {
        files[rel] = slurp(e.path());
      }
    }
    return files;
  };
  const auto a = run("det_a", 1);
  const auto b = run("det_b", 1);
  const auto c = run("det_c", 2);
  if (!a || !b || !c) return {false, "pipeline run failed"};
  const auto fa = collect(*a), fb = collect(*b), fc = collect(*c);
  std::size_t differing = 0;
  for (const auto& [rel, bytes] : fa) {
    if (!fb.count(rel) || fb.at(rel) != bytes) ++differing;
    if (!fc.count(rel) || fc.at(rel) != bytes) ++differing;
  }
  const bool pass = differing == 0 && fa.size() == fb.size() && fa.size() == fc.size();
  for (const auto& dir : {*a, *b, *c}) fs::remove_all(dir);
  return {pass, fmt("%zu artifacts compared across 2 reruns with jobs 1 and 1 run with jobs 2; %zu differ", fa.size(),
                    differing)};
}

}  // namespace

int main() {
  const std::array<std::pair<const char*, std::function<Outcome()>>, 8> criteria{{
      {"binomial likelihood equals k x soft cross-entropy", binomial_equivalence},
      {"gradients match finite differences", gradient_correctness},
      {"HMM monotone EM and exact decoding", hmm_properties},
      {"metric oracles", metric_oracles},
      {"end-to-end synthetic experiment", end_to_end},
      {"entropy non-decreasing in temperature", temperature_entropy},
      {"heteroscedasticity fit recovery", heteroscedasticity_fit},
      {"determinism across reruns and jobs", determinism},
  }};
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::printf("criterion %zu: %s - %s: %s\n", i + 1, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  fs::remove_all(fs::temp_directory_path() / ("somnolog_acceptance_" + std::to_string(::getpid())));
  return failures == 0 ? 0 : 1;
}
