#include "somnolog/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "somnolog/error.hpp"

namespace somnolog {

namespace {

constexpr int kSecondsPerDay = 86400;

double ratio(double num, double den, bool& degenerate) {
  if (den == 0.0) {
    degenerate = true;
    return 0.0;
  }
  return num / den;
}

}  // namespace

ConfusionCounts confusion_counts(std::span<const int> truth, std::span<const double> predictions, double threshold) {
  if (truth.size() != predictions.size()) {
    throw Error(ErrorCode::Contract, "confusion_counts: truth and predictions differ in length");
  }
  ConfusionCounts cc;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] != 0 && truth[i] != 1) throw Error(ErrorCode::Contract, "confusion_counts: truth must be 0 or 1");
    const bool predicted = predictions[i] >= threshold;
    if (truth[i] == 1) {
      predicted ? ++cc.tp : ++cc.fn;
    } else {
      predicted ? ++cc.fp : ++cc.tn;
    }
  }
  return cc;
}

ClassificationReport classification_report(const ConfusionCounts& cc) {
  const double n = static_cast<double>(cc.total());
  if (cc.total() <= 0) throw Error(ErrorCode::Contract, "classification_report: no scored epochs");
  const auto tp = static_cast<double>(cc.tp);
  const auto fp = static_cast<double>(cc.fp);
  const auto tn = static_cast<double>(cc.tn);
  const auto fn = static_cast<double>(cc.fn);
  ClassificationReport r;
  r.accuracy = (tp + tn) / n;
  r.sensitivity = ratio(tp, tp + fn, r.degenerate);
  r.specificity = ratio(tn, tn + fp, r.degenerate);
  r.f1 = ratio(2.0 * tp, 2.0 * tp + fp + fn, r.degenerate);
  const double expected = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n);
  r.kappa = ratio(r.accuracy - expected, 1.0 - expected, r.degenerate);
  r.mcc = ratio(tp * tn - fp * fn, std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)), r.degenerate);
  return r;
}

void CalibrationConfig::validate() const {
  if (n_bins < 2) throw Error(ErrorCode::Contract, "calibration: need at least 2 bins");
}

std::vector<ReliabilityBin> reliability_bins(std::span<const double> predictions, std::span<const int> truth,
                                             const CalibrationConfig& config) {
  config.validate();
  if (predictions.size() != truth.size()) {
    throw Error(ErrorCode::Contract, "calibration: predictions and truth differ in length");
  }
  if (predictions.empty()) throw Error(ErrorCode::Contract, "calibration: empty input");
  const auto m = static_cast<std::size_t>(config.n_bins);
  std::vector<ReliabilityBin> bins(m);
  std::vector<double> correct(m, 0.0), confidence(m, 0.0);
  for (std::size_t b = 0; b < m; ++b) {
    bins[b].lower = static_cast<double>(b) / static_cast<double>(m);
    bins[b].upper = static_cast<double>(b + 1) / static_cast<double>(m);
  }
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double p = predictions[i];
    if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::Contract, "calibration: prediction outside [0, 1]");
    if (truth[i] != 0 && truth[i] != 1) throw Error(ErrorCode::Contract, "calibration: truth must be 0 or 1");
    const std::size_t b = std::min(static_cast<std::size_t>(p * static_cast<double>(m)), m - 1);
    ++bins[b].count;
    confidence[b] += std::max(p, 1.0 - p);
    correct[b] += static_cast<int>(p >= 0.5) == truth[i] ? 1.0 : 0.0;
  }
  for (std::size_t b = 0; b < m; ++b) {
    if (bins[b].count == 0) continue;
    bins[b].accuracy = correct[b] / static_cast<double>(bins[b].count);
    bins[b].confidence = confidence[b] / static_cast<double>(bins[b].count);
  }
  return bins;
}

double expected_calibration_error(std::span<const double> predictions, std::span<const int> truth,
                                  const CalibrationConfig& config) {
  const auto bins = reliability_bins(predictions, truth, config);
  const double n = static_cast<double>(predictions.size());
  double ece = 0.0;
  for (const auto& b : bins) {
    if (b.count > 0) ece += static_cast<double>(b.count) / n * std::abs(b.accuracy - b.confidence);
  }
  return ece;
}

double binary_entropy(double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw Error(ErrorCode::Contract, "entropy: probability outside [0, 1]");
  double h = 0.0;
  if (p > 0.0) h -= p * std::log(p);
  if (p < 1.0) h -= (1.0 - p) * std::log1p(-p);
  return h;
}

double mean_prediction_entropy(std::span<const double> predictions) {
  if (predictions.empty()) throw Error(ErrorCode::Contract, "entropy: empty input");
  double sum = 0.0;
  for (double p : predictions) sum += binary_entropy(p);
  return sum / static_cast<double>(predictions.size());
}

UncertaintyProfile::UncertaintyProfile(int bin_seconds) : bin_seconds_(bin_seconds) {
  if (bin_seconds <= 0 || kSecondsPerDay % bin_seconds != 0) {
    throw Error(ErrorCode::Contract, "profile: bin width must divide 24 h, got " + std::to_string(bin_seconds) + " s");
  }
  const auto n = static_cast<std::size_t>(kSecondsPerDay / bin_seconds);
  sums_.assign(n, 0.0);
  counts_.assign(n, 0);
}

double UncertaintyProfile::mean(std::size_t b) const {
  return counts_[b] > 0 ? sums_[b] / static_cast<double>(counts_[b]) : 0.0;
}

std::size_t UncertaintyProfile::empty_bins() const {
  return static_cast<std::size_t>(std::count(counts_.begin(), counts_.end(), 0LL));
}

void UncertaintyProfile::add(int time_of_day_s, double value) {
  if (time_of_day_s < 0 || time_of_day_s >= kSecondsPerDay) {
    throw Error(ErrorCode::Contract, "profile: time of day outside [0, 86400)");
  }
  if (!(value >= 0.0) || !std::isfinite(value)) throw Error(ErrorCode::Contract, "profile: values must be finite and >= 0");
  const auto b = static_cast<std::size_t>(time_of_day_s / bin_seconds_);
  sums_[b] += value;
  ++counts_[b];
}

void UncertaintyProfile::add(const TimedValues& subject) {
  if (subject.time_of_day_s.size() != subject.values.size()) {
    throw Error(ErrorCode::Contract, "profile: times and values differ in length");
  }
  for (std::size_t i = 0; i < subject.values.size(); ++i) add(subject.time_of_day_s[i], subject.values[i]);
}

void UncertaintyProfile::merge(const UncertaintyProfile& other) {
  if (other.bin_seconds_ != bin_seconds_) throw Error(ErrorCode::Contract, "profile: merging different bin widths");
  for (std::size_t b = 0; b < sums_.size(); ++b) {
    sums_[b] += other.sums_[b];
    counts_[b] += other.counts_[b];
  }
}

UncertaintyProfile daily_uncertainty_profile(std::span<const TimedValues> subjects, int bin_seconds) {
  UncertaintyProfile profile(bin_seconds);
  for (const auto& s : subjects) profile.add(s);
  return profile;
}

void CurveFitOptions::validate() const {
  if (degree < 0) throw Error(ErrorCode::Contract, "curve fit: degree must be >= 0");
  if (pieces < 1) throw Error(ErrorCode::Contract, "curve fit: need at least one piece");
}

double HeteroscedasticityFit::evaluate(double time_of_day_s) const {
  const double width = static_cast<double>(kSecondsPerDay) / pieces;
  const int piece = std::clamp(static_cast<int>(std::floor(time_of_day_s / width)), 0, pieces - 1);
  const double u = time_of_day_s / width - piece;
  const auto& c = coefficients[static_cast<std::size_t>(piece)];
  double y = 0.0;
  for (std::size_t k = c.size(); k-- > 0;) y = y * u + c[k];
  return y;
}

HeteroscedasticityFit fit_uncertainty_curve(const UncertaintyProfile& profile, const CurveFitOptions& options) {
  options.validate();
  const int terms = options.degree + 1;
  const int n_coef = terms * options.pieces;
  const int n_knots = options.pieces - 1;
  const double width = static_cast<double>(kSecondsPerDay) / options.pieces;

  std::vector<int> per_piece(static_cast<std::size_t>(options.pieces), 0);
  std::vector<std::size_t> used;
  for (std::size_t b = 0; b < profile.bins(); ++b) {
    if (profile.count(b) == 0) continue;
    used.push_back(b);
    const double x = profile.bin_start(b) + 0.5 * profile.bin_seconds();
    ++per_piece[static_cast<std::size_t>(std::min(static_cast<int>(x / width), options.pieces - 1))];
  }
  for (int j = 0; j < options.pieces; ++j) {
    if (per_piece[static_cast<std::size_t>(j)] < terms) {
      throw Error(ErrorCode::Contract, "curve fit: piece " + std::to_string(j) + " has " +
                                           std::to_string(per_piece[static_cast<std::size_t>(j)]) +
                                           " non-empty bins, needs " + std::to_string(terms));
    }
  }

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(used.size()), n_coef);
  Eigen::VectorXd y(static_cast<Eigen::Index>(used.size()));
  for (std::size_t r = 0; r < used.size(); ++r) {
    const double x = profile.bin_start(used[r]) + 0.5 * profile.bin_seconds();
    const int piece = std::min(static_cast<int>(x / width), options.pieces - 1);
    const double u = x / width - piece;
    double power = 1.0;
    for (int k = 0; k < terms; ++k, power *= u) a(static_cast<Eigen::Index>(r), piece * terms + k) = power;
    y(static_cast<Eigen::Index>(r)) = profile.mean(used[r]);
  }

  // KKT system for least squares under the continuity constraints
  // p_j(1) - p_{j+1}(0) = 0.
  Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n_coef + n_knots, n_coef + n_knots);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n_coef + n_knots);
  kkt.topLeftCorner(n_coef, n_coef) = 2.0 * a.transpose() * a;
  rhs.head(n_coef) = 2.0 * a.transpose() * y;
  for (int j = 0; j < n_knots; ++j) {
    for (int k = 0; k < terms; ++k) {
      kkt(n_coef + j, j * terms + k) = 1.0;
      kkt(j * terms + k, n_coef + j) = 1.0;
    }
    kkt(n_coef + j, (j + 1) * terms) = -1.0;
    kkt((j + 1) * terms, n_coef + j) = -1.0;
  }
  const Eigen::VectorXd solution = kkt.fullPivLu().solve(rhs);
  if (!solution.allFinite()) throw Error(ErrorCode::Numeric, "curve fit: singular system");

  HeteroscedasticityFit fit;
  fit.degree = options.degree;
  fit.pieces = options.pieces;
  fit.coefficients.assign(static_cast<std::size_t>(options.pieces), std::vector<double>(static_cast<std::size_t>(terms)));
  double integral = 0.0;
  for (int j = 0; j < options.pieces; ++j) {
    for (int k = 0; k < terms; ++k) {
      const double c = solution(j * terms + k);
      fit.coefficients[static_cast<std::size_t>(j)][static_cast<std::size_t>(k)] = c;
      integral += c / (k + 1);
    }
  }
  fit.offset = integral / options.pieces;

  constexpr int kGridPerPiece = 2000;
  double lo = fit.evaluate(0.0);
  double hi = lo;
  for (int j = 0; j < options.pieces; ++j) {
    for (int g = 0; g <= kGridPerPiece; ++g) {
      const double x = (j + static_cast<double>(g) / kGridPerPiece) * width;
      const double v = fit.evaluate(std::min(x, static_cast<double>(kSecondsPerDay)));
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  fit.amplitude = (hi - lo) / 2.0;
  fit.residual_rms = std::sqrt((a * solution.head(n_coef) - y).squaredNorm() / static_cast<double>(used.size()));
  return fit;
}

}  // namespace somnolog
