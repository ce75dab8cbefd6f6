#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace somnolog {

// Sleep is the positive class.
struct ConfusionCounts {
  long long tp = 0;
  long long fp = 0;
  long long tn = 0;
  long long fn = 0;

  long long total() const { return tp + fp + tn + fn; }
};

// Predicted class is 1 iff p >= threshold.
ConfusionCounts confusion_counts(std::span<const int> truth, std::span<const double> predictions,
                                 double threshold = 0.5);

// Ratios with a zero denominator are reported as 0 and set `degenerate`.
struct ClassificationReport {
  double accuracy = 0.0;
  double f1 = 0.0;
  double kappa = 0.0;
  double mcc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  bool degenerate = false;
};

ClassificationReport classification_report(const ConfusionCounts& cc);

// M equal-width bins over the predicted probability p in [0, 1]; bin m holds
// m/M <= p < (m+1)/M, with p = 1 in the last bin. Within a bin, confidence
// is the mean of max(p, 1 - p) and accuracy the fraction of thresholded
// predictions (p >= 0.5) that match the truth.
struct CalibrationConfig {
  int n_bins = 10;

  void validate() const;
};

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  long long count = 0;
  double accuracy = 0.0;
  double confidence = 0.0;
};

std::vector<ReliabilityBin> reliability_bins(std::span<const double> predictions, std::span<const int> truth,
                                             const CalibrationConfig& config = {});

// sum_m |B_m| / n * |acc(B_m) - conf(B_m)|
double expected_calibration_error(std::span<const double> predictions, std::span<const int> truth,
                                  const CalibrationConfig& config = {});

// -[p ln p + (1 - p) ln(1 - p)] with 0 ln 0 = 0.
double binary_entropy(double p);
double mean_prediction_entropy(std::span<const double> predictions);

// Per-subject values stamped with their time of day.
struct TimedValues {
  std::vector<int> time_of_day_s;
  std::vector<double> values;
};

// Running sums per time-of-day bin. Profiles built from disjoint subject sets
// can be merged in any order.
class UncertaintyProfile {
 public:
  explicit UncertaintyProfile(int bin_seconds = 30);

  int bin_seconds() const { return bin_seconds_; }
  std::size_t bins() const { return sums_.size(); }
  int bin_start(std::size_t b) const { return static_cast<int>(b) * bin_seconds_; }
  long long count(std::size_t b) const { return counts_[b]; }
  // 0 for empty bins.
  double mean(std::size_t b) const;
  std::size_t empty_bins() const;

  void add(int time_of_day_s, double value);
  void add(const TimedValues& subject);
  void merge(const UncertaintyProfile& other);

 private:
  int bin_seconds_;
  std::vector<double> sums_;
  std::vector<long long> counts_;
};

// bin_seconds must divide 86400.
UncertaintyProfile daily_uncertainty_profile(std::span<const TimedValues> subjects, int bin_seconds);

struct CurveFitOptions {
  int degree = 4;
  int pieces = 4;

  void validate() const;
};

// Piecewise polynomial over the day: `pieces` equal pieces, each a degree
// `degree` polynomial in the local coordinate u in [0, 1], with equal values
// at interior knots. Fitted by least squares on the non-empty bin centres.
struct HeteroscedasticityFit {
  int degree = 4;
  int pieces = 4;
  std::vector<std::vector<double>> coefficients;  // [piece][power of u]
  double offset = 0.0;     // mean of the curve over 24 h
  double amplitude = 0.0;  // (max - min) / 2 of the curve
  double residual_rms = 0.0;

  double evaluate(double time_of_day_s) const;
};

HeteroscedasticityFit fit_uncertainty_curve(const UncertaintyProfile& profile, const CurveFitOptions& options = {});

}  // namespace somnolog
