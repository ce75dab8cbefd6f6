#include "somnolog/hmm.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "somnolog/error.hpp"

namespace somnolog {

namespace {

constexpr double kStochasticTolerance = 1e-12;
constexpr double kDegenerateMeanGap = 1e-9;

double log_gaussian(double x, double mean, double var) {
  const double d = x - mean;
  return -0.5 * (std::log(2.0 * std::numbers::pi * var) + d * d / var);
}

// Scaled forward-backward pass. alpha/beta are normalised per step and the
// per-step log scale factors sum to the log-likelihood.
struct ForwardBackward {
  std::vector<std::array<double, 2>> alpha;
  std::vector<std::array<double, 2>> beta;
  std::vector<std::array<double, 2>> emission;  // scaled by exp(-emission_shift)
  std::vector<double> scale;                    // normaliser of alpha at t
  double log_likelihood = 0.0;
};

ForwardBackward forward_backward(std::span<const double> obs, const HmmParams& p) {
  const std::size_t n = obs.size();
  ForwardBackward fb;
  fb.alpha.resize(n);
  fb.beta.resize(n);
  fb.emission.resize(n);
  fb.scale.resize(n);

  double log_likelihood = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double l0 = log_gaussian(obs[t], p.mean[0], p.var[0]);
    const double l1 = log_gaussian(obs[t], p.mean[1], p.var[1]);
    const double shift = std::max(l0, l1);
    fb.emission[t] = {std::exp(l0 - shift), std::exp(l1 - shift)};
    log_likelihood += shift;
  }

  for (std::size_t t = 0; t < n; ++t) {
    std::array<double, 2> a{};
    for (int j = 0; j < 2; ++j) {
      double prior;
      if (t == 0) {
        prior = p.initial[j];
      } else {
        prior = fb.alpha[t - 1][0] * p.transition[0][j] + fb.alpha[t - 1][1] * p.transition[1][j];
      }
      a[j] = prior * fb.emission[t][j];
    }
    const double c = a[0] + a[1];
    if (!(c > 0.0) || !std::isfinite(c)) {
      throw Error(ErrorCode::Numeric, "hmm: observation sequence has zero likelihood");
    }
    fb.scale[t] = c;
    fb.alpha[t] = {a[0] / c, a[1] / c};
    log_likelihood += std::log(c);
  }

  fb.beta[n - 1] = {1.0, 1.0};
  for (std::size_t t = n - 1; t-- > 0;) {
    for (int i = 0; i < 2; ++i) {
      double s = 0.0;
      for (int j = 0; j < 2; ++j) s += p.transition[i][j] * fb.emission[t + 1][j] * fb.beta[t + 1][j];
      fb.beta[t][i] = s / fb.scale[t + 1];
    }
  }
  fb.log_likelihood = log_likelihood;
  return fb;
}

void require_observations(std::span<const double> obs, std::size_t minimum) {
  if (obs.size() < minimum) {
    throw Error(ErrorCode::Contract, "hmm: need at least " + std::to_string(minimum) + " observations");
  }
  for (double x : obs) {
    if (!std::isfinite(x)) throw Error(ErrorCode::Contract, "hmm: observations must be finite");
  }
}

// Puts the lower-mean state at index 1 (sleep).
void order_states(HmmParams& p) {
  if (p.mean[1] <= p.mean[0]) return;
  std::swap(p.initial[0], p.initial[1]);
  std::swap(p.mean[0], p.mean[1]);
  std::swap(p.var[0], p.var[1]);
  std::swap(p.transition[0][0], p.transition[1][1]);
  std::swap(p.transition[0][1], p.transition[1][0]);
}

}  // namespace

void HmmParams::validate() const {
  const auto near_one = [](double s) { return std::abs(s - 1.0) <= kStochasticTolerance; };
  for (double v : initial) {
    if (!(v >= 0.0)) throw Error(ErrorCode::Contract, "hmm: negative initial probability");
  }
  if (!near_one(initial[0] + initial[1])) throw Error(ErrorCode::Contract, "hmm: initial distribution must sum to 1");
  for (const auto& row : transition) {
    if (!(row[0] >= 0.0) || !(row[1] >= 0.0) || !near_one(row[0] + row[1])) {
      throw Error(ErrorCode::Contract, "hmm: transition rows must be stochastic");
    }
  }
  for (int s = 0; s < 2; ++s) {
    if (!std::isfinite(mean[s])) throw Error(ErrorCode::Contract, "hmm: emission means must be finite");
    if (!(var[s] >= kHmmVarianceFloor)) throw Error(ErrorCode::Contract, "hmm: emission variance below floor");
  }
}

std::vector<double> log_activity(std::span<const double> counts) {
  std::vector<double> out(counts.size());
  std::transform(counts.begin(), counts.end(), out.begin(), [](double c) { return std::log1p(c); });
  return out;
}

HmmParams hmm_quantile_init(std::span<const double> observations) {
  require_observations(observations, 2);
  std::vector<double> sorted(observations.begin(), observations.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t half = sorted.size() / 2;
  const auto moments = [](auto first, auto last) {
    const double n = static_cast<double>(last - first);
    double mean = 0.0;
    for (auto it = first; it != last; ++it) mean += *it;
    mean /= n;
    double var = 0.0;
    for (auto it = first; it != last; ++it) var += (*it - mean) * (*it - mean);
    return std::pair{mean, std::max(var / n, kHmmVarianceFloor)};
  };
  const auto [low_mean, low_var] = moments(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(half));
  const auto [high_mean, high_var] = moments(sorted.begin() + static_cast<std::ptrdiff_t>(half), sorted.end());

  HmmParams p;
  p.initial = {0.5, 0.5};
  p.transition = {{{0.9, 0.1}, {0.1, 0.9}}};
  p.mean = {high_mean, low_mean};
  p.var = {high_var, low_var};
  return p;
}

HmmPosterior hmm_posterior(std::span<const double> observations, const HmmParams& params) {
  require_observations(observations, 1);
  params.validate();
  const ForwardBackward fb = forward_backward(observations, params);
  HmmPosterior out;
  out.log_likelihood = fb.log_likelihood;
  out.state.resize(observations.size());
  for (std::size_t t = 0; t < observations.size(); ++t) {
    const double g0 = fb.alpha[t][0] * fb.beta[t][0];
    const double g1 = fb.alpha[t][1] * fb.beta[t][1];
    out.state[t] = {g0 / (g0 + g1), g1 / (g0 + g1)};
  }
  return out;
}

double hmm_log_likelihood(std::span<const double> observations, const HmmParams& params) {
  require_observations(observations, 1);
  params.validate();
  return forward_backward(observations, params).log_likelihood;
}

std::vector<int> hmm_decode(std::span<const double> observations, const HmmParams& params) {
  std::vector<int> labels(observations.size(), 0);
  if (observations.empty()) return labels;
  params.validate();
  if (std::abs(params.mean[0] - params.mean[1]) <= kDegenerateMeanGap) return labels;
  const int sleep_state = params.mean[1] < params.mean[0] ? 1 : 0;
  const HmmPosterior posterior = hmm_posterior(observations, params);
  for (std::size_t t = 0; t < observations.size(); ++t) {
    labels[t] = posterior.state[t][static_cast<std::size_t>(sleep_state)] > 0.5 ? 1 : 0;
  }
  return labels;
}

HmmFitResult hmm_fit(std::span<const double> observations, const HmmFitOptions& options) {
  require_observations(observations, 10);
  if (options.max_iter < 1) throw Error(ErrorCode::Contract, "hmm: max_iter must be >= 1");
  const std::size_t n = observations.size();

  HmmFitResult result;
  HmmParams p = options.init ? *options.init : hmm_quantile_init(observations);
  for (auto& v : p.var) {
    if (v < kHmmVarianceFloor) {
      v = kHmmVarianceFloor;
      result.variance_floored = true;
    }
  }
  p.validate();

  for (int iter = 0; iter < options.max_iter; ++iter) {
    const ForwardBackward fb = forward_backward(observations, p);
    result.log_likelihood.push_back(fb.log_likelihood);
    if (iter > 0) {
      const double gain = fb.log_likelihood - result.log_likelihood[result.log_likelihood.size() - 2];
      if (std::abs(gain) < options.tol) {
        result.converged = true;
        break;
      }
    }

    // E-step sufficient statistics.
    std::array<double, 2> occupancy{};
    std::array<double, 2> weighted_sum{};
    std::array<std::array<double, 2>, 2> transitions{};
    std::array<double, 2> first{};
    std::vector<std::array<double, 2>> gamma(n);
    for (std::size_t t = 0; t < n; ++t) {
      const double g0 = fb.alpha[t][0] * fb.beta[t][0];
      const double g1 = fb.alpha[t][1] * fb.beta[t][1];
      const double norm = g0 + g1;
      gamma[t] = {g0 / norm, g1 / norm};
      for (int s = 0; s < 2; ++s) {
        occupancy[s] += gamma[t][s];
        weighted_sum[s] += gamma[t][s] * observations[t];
      }
      if (t + 1 < n) {
        for (int i = 0; i < 2; ++i) {
          for (int j = 0; j < 2; ++j) {
            transitions[i][j] += fb.alpha[t][i] * p.transition[i][j] * fb.emission[t + 1][j] *
                                 fb.beta[t + 1][j] / fb.scale[t + 1];
          }
        }
      }
    }
    first = gamma[0];

    // M-step.
    HmmParams next;
    next.initial = {first[0] / (first[0] + first[1]), first[1] / (first[0] + first[1])};
    for (int i = 0; i < 2; ++i) {
      const double row = transitions[i][0] + transitions[i][1];
      if (row > 0.0) {
        next.transition[i] = {transitions[i][0] / row, transitions[i][1] / row};
      } else {
        next.transition[i] = p.transition[i];
      }
    }
    for (int s = 0; s < 2; ++s) {
      if (occupancy[s] <= 0.0) {
        next.mean[s] = p.mean[s];
        next.var[s] = p.var[s];
        continue;
      }
      next.mean[s] = weighted_sum[s] / occupancy[s];
      double var = 0.0;
      for (std::size_t t = 0; t < n; ++t) {
        const double d = observations[t] - next.mean[s];
        var += gamma[t][s] * d * d;
      }
      var /= occupancy[s];
      if (var < kHmmVarianceFloor) {
        var = kHmmVarianceFloor;
        result.variance_floored = true;
      }
      next.var[s] = var;
    }
    p = next;
    result.iterations = iter + 1;
  }
  if (!result.converged) result.log_likelihood.push_back(forward_backward(observations, p).log_likelihood);

  order_states(p);
  result.degenerate = std::abs(p.mean[0] - p.mean[1]) <= kDegenerateMeanGap;
  result.params = p;
  return result;
}

}  // namespace somnolog
