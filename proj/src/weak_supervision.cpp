#include "somnolog/weak_supervision.hpp"

#include <algorithm>
#include <cmath>

#include "somnolog/error.hpp"

namespace somnolog {

WeakLabelMatrix::WeakLabelMatrix(std::vector<std::string> labelers, std::size_t length)
    : labelers_(std::move(labelers)),
      length_(length),
      labels_(labelers_.size() * length, 0),
      valid_(labelers_.size() * length, 0) {
  if (labelers_.empty()) throw Error(ErrorCode::Contract, "weak label matrix needs at least one labeler");
}

void WeakLabelMatrix::set(std::size_t i, std::size_t t, int label) {
  if (label != 0 && label != 1) throw Error(ErrorCode::Contract, "weak labels must be 0 or 1");
  labels_[i * length_ + t] = static_cast<std::uint8_t>(label);
  valid_[i * length_ + t] = 1;
}

void WeakLabelMatrix::set_invalid(std::size_t i, std::size_t t) {
  labels_[i * length_ + t] = 0;
  valid_[i * length_ + t] = 0;
}

void WeakLabelMatrix::set_row(std::size_t i, std::span<const std::uint8_t> labels,
                              std::span<const std::uint8_t> valid) {
  if (labels.size() != length_ || valid.size() != length_) {
    throw Error(ErrorCode::Contract, "weak label row length mismatch");
  }
  for (std::size_t t = 0; t < length_; ++t) {
    if (valid[t]) {
      set(i, t, labels[t]);
    } else {
      set_invalid(i, t);
    }
  }
}

SoftLabelSeries vote_counts(const WeakLabelMatrix& matrix) {
  SoftLabelSeries out;
  out.votes.assign(matrix.length(), 0);
  out.k_effective.assign(matrix.length(), 0);
  for (std::size_t i = 0; i < matrix.k(); ++i) {
    for (std::size_t t = 0; t < matrix.length(); ++t) {
      if (!matrix.valid(i, t)) continue;
      out.votes[t] += matrix.label(i, t);
      out.k_effective[t] += 1;
    }
  }
  return out;
}

int majority_of(int votes, int k_effective) { return 2 * votes > k_effective ? 1 : 0; }

SoftLabelSeries soft_labels(const WeakLabelMatrix& matrix) {
  SoftLabelSeries out = vote_counts(matrix);
  out.p_hat.assign(out.size(), 0.0);
  out.majority.assign(out.size(), 0);
  for (std::size_t t = 0; t < out.size(); ++t) {
    if (out.k_effective[t] == 0) continue;
    out.p_hat[t] = static_cast<double>(out.votes[t]) / static_cast<double>(out.k_effective[t]);
    out.majority[t] = majority_of(out.votes[t], out.k_effective[t]);
  }
  return out;
}

std::vector<int> majority_vote(const WeakLabelMatrix& matrix) { return soft_labels(matrix).majority; }

double clamp_probability(double f) { return std::clamp(f, kProbabilityEpsilon, 1.0 - kProbabilityEpsilon); }

double binomial_nll(const SoftLabelSeries& targets, std::span<const double> probs) {
  if (probs.size() != targets.size()) throw Error(ErrorCode::Contract, "binomial_nll: length mismatch");
  double nll = 0.0;
  for (std::size_t t = 0; t < probs.size(); ++t) {
    if (targets.k_effective[t] == 0) continue;
    const double f = clamp_probability(probs[t]);
    const double y = targets.votes[t];
    const double k = targets.k_effective[t];
    nll -= y * std::log(f) + (k - y) * std::log1p(-f);
  }
  return nll;
}

std::vector<std::optional<double>> ensemble_variance(const WeakLabelMatrix& matrix) {
  const SoftLabelSeries counts = vote_counts(matrix);
  std::vector<std::optional<double>> out(matrix.length());
  for (std::size_t t = 0; t < matrix.length(); ++t) {
    const int k = counts.k_effective[t];
    if (k < 2) continue;
    const double p = static_cast<double>(counts.votes[t]) / k;
    double sum = 0.0;
    for (std::size_t i = 0; i < matrix.k(); ++i) {
      if (!matrix.valid(i, t)) continue;
      const double d = matrix.label(i, t) - p;
      sum += d * d;
    }
    out[t] = sum / (k - 1);
  }
  return out;
}

}  // namespace somnolog
