#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace somnolog {

// Two-state Gaussian HMM. After fitting, state 1 is the sleep state (lower
// emission mean) and state 0 is wake, so state index equals the label.
struct HmmParams {
  std::array<double, 2> initial{0.5, 0.5};
  std::array<std::array<double, 2>, 2> transition{{{0.5, 0.5}, {0.5, 0.5}}};
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> var{1.0, 1.0};

  void validate() const;
};

inline constexpr double kHmmVarianceFloor = 1e-6;

struct HmmFitOptions {
  int max_iter = 100;
  double tol = 1e-6;
  // Starting point; the quantile split initialisation is used when empty.
  std::optional<HmmParams> init;
};

struct HmmFitResult {
  HmmParams params;
  // Log-likelihood of the observations under the parameters entering each
  // EM iteration, followed by the value under the returned parameters.
  std::vector<double> log_likelihood;
  int iterations = 0;
  bool converged = false;
  bool variance_floored = false;
  // Both states share one emission distribution; decoding yields wake.
  bool degenerate = false;
};

struct HmmPosterior {
  std::vector<std::array<double, 2>> state;  // P(state | all observations)
  double log_likelihood = 0.0;
};

// Observation transform used by the ensemble: log(1 + count).
std::vector<double> log_activity(std::span<const double> counts);

// Splits the sorted observations at the median: the lower half seeds the
// sleep state, the upper half the wake state.
HmmParams hmm_quantile_init(std::span<const double> observations);

// Baum-Welch with scaled forward-backward recursions.
HmmFitResult hmm_fit(std::span<const double> observations, const HmmFitOptions& options = {});

HmmPosterior hmm_posterior(std::span<const double> observations, const HmmParams& params);
double hmm_log_likelihood(std::span<const double> observations, const HmmParams& params);

// 1 iff the posterior probability of the lower-mean state exceeds 0.5. Ties
// and parameter sets whose two states are indistinguishable decode to 0.
std::vector<int> hmm_decode(std::span<const double> observations, const HmmParams& params);

}  // namespace somnolog
