#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace somnolog {

// k x T table of binary weak labels y_it with a validity mask. Cells whose
// labeler lacked context are invalid and ignored by every aggregate below.
class WeakLabelMatrix {
 public:
  WeakLabelMatrix() = default;
  WeakLabelMatrix(std::vector<std::string> labelers, std::size_t length);

  std::size_t k() const { return labelers_.size(); }
  std::size_t length() const { return length_; }
  const std::vector<std::string>& labelers() const { return labelers_; }

  bool valid(std::size_t i, std::size_t t) const { return valid_[i * length_ + t] != 0; }
  int label(std::size_t i, std::size_t t) const { return labels_[i * length_ + t]; }
  void set(std::size_t i, std::size_t t, int label);
  void set_invalid(std::size_t i, std::size_t t);

  // Copies one labeler's row; invalid cells are flagged in `valid`.
  void set_row(std::size_t i, std::span<const std::uint8_t> labels, std::span<const std::uint8_t> valid);

 private:
  std::vector<std::string> labelers_;
  std::size_t length_ = 0;
  std::vector<std::uint8_t> labels_;
  std::vector<std::uint8_t> valid_;
};

// Per-epoch ensemble agreement. Epochs with k_effective == 0 are not scored:
// their p_hat is 0 and they are excluded from training and evaluation.
struct SoftLabelSeries {
  std::vector<int> votes;
  std::vector<int> k_effective;
  std::vector<double> p_hat;
  std::vector<int> majority;

  std::size_t size() const { return votes.size(); }
  bool scored(std::size_t t) const { return k_effective[t] > 0; }
};

// votes and k_effective only.
SoftLabelSeries vote_counts(const WeakLabelMatrix& matrix);
// votes, k_effective, p_hat and majority.
SoftLabelSeries soft_labels(const WeakLabelMatrix& matrix);

// 1 iff strictly more than half of the valid labelers vote sleep.
std::vector<int> majority_vote(const WeakLabelMatrix& matrix);
int majority_of(int votes, int k_effective);

inline constexpr double kProbabilityEpsilon = 1e-7;
double clamp_probability(double f);

// Binomial negative log-likelihood without the binomial coefficient:
//   -sum_t [ y_t ln f_t + (k_t - y_t) ln(1 - f_t) ]
// Unscored epochs contribute nothing.
double binomial_nll(const SoftLabelSeries& targets, std::span<const double> probs);

// Sample variance of the labels at each epoch (k_t - 1 denominator);
// missing where fewer than two labelers are valid.
std::vector<std::optional<double>> ensemble_variance(const WeakLabelMatrix& matrix);

}  // namespace somnolog
