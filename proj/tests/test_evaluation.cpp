#include <doctest.h>

#include <cmath>
#include <numbers>

#include "somnolog/error.hpp"
#include "somnolog/evaluation.hpp"
#include "somnolog/random.hpp"

using namespace somnolog;

namespace {

ClassificationReport report_of(const std::vector<int>& truth, const std::vector<double>& preds) {
  return classification_report(confusion_counts(truth, preds));
}

// Straight-line reference over explicit class lists.
ClassificationReport reference_report(const std::vector<int>& truth, const std::vector<int>& predicted) {
  double tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (predicted[i] == 1 && truth[i] == 1) tp += 1;
    if (predicted[i] == 1 && truth[i] == 0) fp += 1;
    if (predicted[i] == 0 && truth[i] == 0) tn += 1;
    if (predicted[i] == 0 && truth[i] == 1) fn += 1;
  }
  ClassificationReport r;
  const double n = tp + fp + tn + fn;
  const auto ratio = [&r](double num, double den) {
    if (den == 0.0) {
      r.degenerate = true;
      return 0.0;
    }
    return num / den;
  };
  r.accuracy = (tp + tn) / n;
  r.sensitivity = ratio(tp, tp + fn);
  r.specificity = ratio(tn, tn + fp);
  r.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  const double expected = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n);
  r.kappa = ratio(r.accuracy - expected, 1.0 - expected);
  r.mcc = ratio(tp * tn - fp * fn, std::sqrt((tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)));
  return r;
}

}  // namespace

TEST_CASE("confusion counts") {
  const ConfusionCounts perfect = confusion_counts(std::vector<int>{1, 0}, std::vector<double>{0.9, 0.1});
  CHECK(perfect.tp == 1);
  CHECK(perfect.tn == 1);
  CHECK(perfect.fp == 0);
  CHECK(perfect.fn == 0);
  const ConfusionCounts inverted = confusion_counts(std::vector<int>{1, 0}, std::vector<double>{0.1, 0.9});
  CHECK(inverted.fn == 1);
  CHECK(inverted.fp == 1);
  CHECK(confusion_counts(std::vector<int>{1}, std::vector<double>{0.5}).tp == 1);
  CHECK_THROWS_AS(confusion_counts(std::vector<int>{1, 0}, std::vector<double>{0.5}), Error);
  CHECK_THROWS_AS(confusion_counts(std::vector<int>{2}, std::vector<double>{0.5}), Error);
}

TEST_CASE("classification report reference cases") {
  const ClassificationReport perfect = report_of({1, 0, 1, 0}, {1, 0, 1, 0});
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.f1 == 1.0);
  CHECK(perfect.kappa == 1.0);
  CHECK(perfect.mcc == 1.0);
  CHECK(perfect.sensitivity == 1.0);
  CHECK(perfect.specificity == 1.0);
  CHECK_FALSE(perfect.degenerate);

  const ClassificationReport chance = report_of({1, 1, 0, 0}, {1, 0, 1, 0});
  CHECK(chance.mcc == 0.0);
  CHECK(chance.kappa == 0.0);
  CHECK(chance.accuracy == 0.5);

  const ClassificationReport wake = report_of({1, 0, 1, 0, 0}, {0, 0, 0, 0, 0});
  CHECK(wake.sensitivity == 0.0);
  CHECK(wake.specificity == 1.0);
  CHECK(wake.mcc == 0.0);
  CHECK(wake.f1 == 0.0);
  CHECK(wake.kappa == 0.0);
  CHECK(wake.degenerate);

  CHECK_THROWS_AS(classification_report(ConfusionCounts{}), Error);
}

TEST_CASE("classification report equals the reference on random instances") {
  Rng rng(101);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t n = 1 + rng.below(50);
    std::vector<int> truth(n), predicted(n);
    std::vector<double> probs(n);
    const double bias = rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng.bernoulli(bias) ? 1 : 0;
      probs[i] = rng.uniform();
      predicted[i] = probs[i] >= 0.5 ? 1 : 0;
    }
    const ClassificationReport got = classification_report(confusion_counts(truth, probs));
    const ClassificationReport want = reference_report(truth, predicted);
    CHECK(got.accuracy == want.accuracy);
    CHECK(got.f1 == want.f1);
    CHECK(got.kappa == want.kappa);
    CHECK(got.mcc == want.mcc);
    CHECK(got.sensitivity == want.sensitivity);
    CHECK(got.specificity == want.specificity);
    CHECK(got.degenerate == want.degenerate);
    CHECK(got.mcc >= -1.0);
    CHECK(got.mcc <= 1.0);
    CHECK(got.kappa <= 1.0);
    CHECK(got.f1 >= 0.0);
    CHECK(got.f1 <= 1.0);
  }
}

TEST_CASE("expected calibration error hand example") {
  const std::vector<double> preds{0.9, 0.9, 0.2};
  const std::vector<int> truth{1, 0, 0};
  CHECK(std::abs(expected_calibration_error(preds, truth, CalibrationConfig{2}) - 1.0 / 3.0) < 1e-12);
  const auto bins = reliability_bins(preds, truth, CalibrationConfig{2});
  REQUIRE(bins.size() == 2);
  CHECK(bins[0].count == 1);
  CHECK(bins[0].accuracy == 1.0);
  CHECK(bins[0].confidence == doctest::Approx(0.8));
  CHECK(bins[1].count == 2);
  CHECK(bins[1].accuracy == 0.5);
}

TEST_CASE("calibrated and saturated sets have zero ECE") {
  std::vector<double> preds;
  std::vector<int> truth;
  // 0.95 with 19 of 20 sleep; 0.25 with 3 of 4 wake; 0.65 with 13 of 20 sleep.
  for (int i = 0; i < 20; ++i) {
    preds.push_back(0.95);
    truth.push_back(i < 19 ? 1 : 0);
  }
  for (int i = 0; i < 4; ++i) {
    preds.push_back(0.25);
    truth.push_back(i < 3 ? 0 : 1);
  }
  for (int i = 0; i < 20; ++i) {
    preds.push_back(0.65);
    truth.push_back(i < 13 ? 1 : 0);
  }
  CHECK(expected_calibration_error(preds, truth) < 1e-12);
  CHECK(expected_calibration_error(std::vector<double>(10, 1.0), std::vector<int>(10, 1)) == 0.0);
  CHECK_THROWS_AS(expected_calibration_error(std::vector<double>{}, std::vector<int>{}), Error);
  CHECK_THROWS_AS(expected_calibration_error(std::vector<double>{1.5}, std::vector<int>{1}), Error);
}

TEST_CASE("ECE stays within [0, 1] on random inputs") {
  Rng rng(7);
  for (int rep = 0; rep < 200; ++rep) {
    const std::size_t n = 1 + rng.below(100);
    std::vector<double> p(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = rng.uniform();
      y[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    const double ece = expected_calibration_error(p, y, CalibrationConfig{static_cast<int>(2 + rng.below(20))});
    CHECK(ece >= 0.0);
    CHECK(ece <= 1.0);
  }
}

TEST_CASE("prediction entropy") {
  CHECK(mean_prediction_entropy(std::vector<double>(4, 0.5)) == doctest::Approx(std::log(2.0)));
  CHECK(mean_prediction_entropy(std::vector<double>{0.0, 1.0, 1.0}) == 0.0);
  CHECK(mean_prediction_entropy(std::vector<double>{0.9}) == doctest::Approx(0.3251).epsilon(1e-4));
  CHECK_THROWS_AS(mean_prediction_entropy(std::vector<double>{}), Error);
  Rng rng(8);
  for (int i = 0; i < 1000; ++i) {
    const double h = binary_entropy(rng.uniform());
    CHECK(h >= 0.0);
    CHECK(h <= std::log(2.0) + 1e-15);
  }
}

TEST_CASE("daily profile averages by time of day") {
  TimedValues a, b;
  for (int t = 0; t < 86400; t += 30) {
    a.time_of_day_s.push_back(t);
    a.values.push_back(0.1);
    b.time_of_day_s.push_back(t);
    b.values.push_back(0.3);
  }
  const std::vector<TimedValues> one{a};
  const UncertaintyProfile flat = daily_uncertainty_profile(one, 30);
  CHECK(flat.bins() == 2880);
  CHECK(flat.empty_bins() == 0);
  for (std::size_t i = 0; i < flat.bins(); ++i) CHECK(flat.mean(i) == doctest::Approx(0.1));

  const std::vector<TimedValues> two{a, b};
  const UncertaintyProfile avg = daily_uncertainty_profile(two, 30);
  for (std::size_t i = 0; i < avg.bins(); ++i) {
    CHECK(avg.mean(i) == doctest::Approx(0.2));
    CHECK(avg.count(i) == 2);
  }

  UncertaintyProfile left(30), right(30);
  left.add(a);
  right.add(b);
  right.merge(left);
  for (std::size_t i = 0; i < avg.bins(); i += 97) CHECK(right.mean(i) == doctest::Approx(avg.mean(i)));

  UncertaintyProfile sparse(3600);
  sparse.add(7200 + 59, 0.4);
  CHECK(sparse.bins() == 24);
  CHECK(sparse.count(2) == 1);
  CHECK(sparse.empty_bins() == 23);
  CHECK(sparse.mean(5) == 0.0);
  CHECK_THROWS_AS(UncertaintyProfile(7), Error);
  CHECK_THROWS_AS(right.merge(sparse), Error);
}

TEST_CASE("curve fit: constant profile") {
  UncertaintyProfile p(300);
  for (int t = 0; t < 86400; t += 300) p.add(t, 0.25);
  const HeteroscedasticityFit fit = fit_uncertainty_curve(p);
  CHECK(fit.amplitude < 1e-8);
  CHECK(fit.offset == doctest::Approx(0.25).epsilon(1e-10));
  CHECK(fit.residual_rms < 1e-10);
}

TEST_CASE("curve fit: planted cosine is recovered") {
  UncertaintyProfile p(30);
  for (int t = 0; t < 86400; t += 30) {
    const double centre = t + 15.0;
    p.add(t, 0.3 + 0.05 * std::cos(2.0 * std::numbers::pi * centre / 86400.0));
  }
  const HeteroscedasticityFit fit = fit_uncertainty_curve(p);
  CHECK(std::abs(fit.amplitude - 0.05) < 0.05 * 0.05);
  CHECK(std::abs(fit.offset - 0.3) < 0.02 * 0.3);
  CHECK(fit.amplitude >= 0.0);
}

TEST_CASE("curve fit: one piece reproduces a quartic exactly") {
  const std::vector<double> c{0.2, -0.3, 1.1, -1.7, 0.9};
  const auto g = [&c](double u) {
    double v = 0.0;
    for (std::size_t k = c.size(); k-- > 0;) v = v * u + c[k];
    return v;
  };
  UncertaintyProfile p(600);
  for (int t = 0; t < 86400; t += 600) p.add(t, g((t + 300.0) / 86400.0));
  const HeteroscedasticityFit fit = fit_uncertainty_curve(p, CurveFitOptions{4, 1});
  CHECK(fit.residual_rms < 1e-8);
  REQUIRE(fit.coefficients.size() == 1);
  for (std::size_t k = 0; k < c.size(); ++k) CHECK(fit.coefficients[0][k] == doctest::Approx(c[k]).epsilon(1e-8));
  CHECK(fit.evaluate(43200.0) == doctest::Approx(g(0.5)).epsilon(1e-10));
  const double mean = c[0] + c[1] / 2 + c[2] / 3 + c[3] / 4 + c[4] / 5;
  CHECK(fit.offset == doctest::Approx(mean).epsilon(1e-8));
}

TEST_CASE("curve fit: pieces join continuously and need enough bins") {
  Rng rng(3);
  UncertaintyProfile p(900);
  for (int t = 0; t < 86400; t += 900) p.add(t, 0.2 + 0.1 * rng.uniform());
  const HeteroscedasticityFit fit = fit_uncertainty_curve(p, CurveFitOptions{4, 4});
  for (int knot = 1; knot < 4; ++knot) {
    const double t = knot * 21600.0;
    CHECK(fit.evaluate(t - 1e-6) == doctest::Approx(fit.evaluate(t + 1e-6)).epsilon(1e-6));
  }
  UncertaintyProfile sparse(3600);
  for (int t = 0; t < 43200; t += 3600) sparse.add(t, 0.1);
  CHECK_THROWS_AS(fit_uncertainty_curve(sparse, CurveFitOptions{4, 4}), Error);
  CHECK_THROWS_AS(fit_uncertainty_curve(p, CurveFitOptions{-1, 4}), Error);
}
